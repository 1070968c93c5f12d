"""Command-line entry point: ``run``, ``sweep``, ``bounds`` and ``replay-schedule``.

Exit codes: 0 success, 2 invalid configuration, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from .config import RunConfig, theorem1_check, theorem1_setup
from .errors import ConfigError, DivergenceError
from .metrics import emit_trace
from .participation import delay_stats, dump_schedule, generate_schedule, load_replay
from .simulation import Simulation
from .streams import Streams
from .theory import DelaySummary, ProblemConstants, bounds_report, delay_bound_for, NoClosedFormBound

log = logging.getLogger("fedsum")

THREADS_ENV = "FEDSUM_THREADS"
CHECKPOINT_DIR = "checkpoint"


def execute(cfg: RunConfig, resume: bool = False) -> dict:
    """Run one configuration and write config, trace and summary into ``cfg.output``."""
    cfg.validate()
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    objective = cfg.build_problem()
    pattern = cfg.build_pattern()
    t1 = None
    if cfg.theorem1 is not None:
        hp, constants, delays = theorem1_setup(cfg, objective)
        t1 = (constants, delays)
    else:
        hp = cfg.hyperparams()

    if resume and (out / CHECKPOINT_DIR / "state.json").exists():
        sim = Simulation.load_checkpoint(out / CHECKPOINT_DIR, objective, pattern)
        log.info("resumed %s at round %d", out, sim.t)
    else:
        sim = Simulation(objective, cfg.algorithm, hp, pattern, cfg.seed, cfg.rounds, cfg.eval_every)
    (out / "config.json").write_text(cfg.dumps() + "\n")

    every = cfg.checkpoint_every
    while not sim.done:
        stop = cfg.rounds if not every else min(cfg.rounds, (sim.t // every + 1) * every)
        sim.run(until=stop)
        if every and not sim.done:
            sim.save_checkpoint(out / CHECKPOINT_DIR)

    emit_trace(sim.rows, out / f"trace.{cfg.format}", cfg.format)
    summary = sim.summary()
    summary["seed"] = cfg.seed
    summary["eta_g"] = hp.eta_g
    summary["eta_l"] = hp.eta_l
    if t1 is not None:
        constants, delays = t1
        summary["theorem1"] = {
            "tau_max_used": delays.tau_max,
            "tau_avg_used": delays.tau_avg,
            **theorem1_check(summary["avg_grad_norm_sq"], constants, delays),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_seeds(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def _sweep_job(args):
    data, value, seed = args
    cfg = RunConfig.from_dict(data)
    summary = execute(cfg)
    return value, seed, summary


def sweep(template: RunConfig, axis: str, values: list, seeds: list[int], output: str | Path, workers: int = 1) -> dict:
    """One run per (value, seed); writes ``aggregate.csv`` and ``sweep_summary.json`` under ``output``."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    output = Path(output)
    jobs = []
    for value in values:
        for seed in seeds:
            cfg = RunConfig.from_dict(template.to_dict())
            cfg.set_path(axis, copy.deepcopy(value))
            cfg.seed = seed
            cfg.output = str(output / f"{axis}={value}" / f"seed={seed}")
            cfg.validate()
            jobs.append((cfg.to_dict(), value, seed))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(job) for job in jobs]

    output.mkdir(parents=True, exist_ok=True)
    columns = ["value", "seed", "final_grad_norm_sq", "avg_grad_norm_sq", "tau_max", "tau_avg", "cum_down", "cum_up"]
    with open(output / "aggregate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis if c == "value" else c for c in columns])
        for value, seed, s in results:
            writer.writerow([json.dumps(value), seed] + [s[c] for c in columns[2:]])

    per_value = {}
    for value in values:
        rows = [s for v, _, s in results if v == value]
        finals = [s["final_grad_norm_sq"] for s in rows]
        avgs = [s["avg_grad_norm_sq"] for s in rows]
        per_value[json.dumps(value)] = {
            "runs": len(rows),
            "mean_final_grad_norm_sq": statistics.fmean(finals),
            "median_final_grad_norm_sq": statistics.median(finals),
            "mean_avg_grad_norm_sq": statistics.fmean(avgs),
            "median_avg_grad_norm_sq": statistics.median(avgs),
        }
    report = {"axis": axis, "values": values, "seeds": seeds, "per_value": per_value}
    (output / "sweep_summary.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def _bounds(cfg: RunConfig, tau_max: Optional[int], tau_avg: Optional[float]) -> dict:
    objective = cfg.build_problem()
    pattern = cfg.build_pattern()
    n = objective.n_clients
    if tau_max is None or tau_avg is None:
        tracker = delay_stats(generate_schedule(pattern, n, cfg.rounds, Streams(cfg.seed)), n)
        tau_max = tracker.tau_max if tau_max is None else tau_max
        tau_avg = tracker.tau_avg if tau_avg is None else tau_avg
    delta_f = (cfg.theorem1 or {}).get("delta_f", objective.delta_f)
    if delta_f is None:
        raise ConfigError("problem has no known optimum; pass delta_f via the theorem1 config block")
    constants = ProblemConstants(objective.L, objective.sigma, float(delta_f), objective.F0, n, cfg.local_steps, cfg.rounds)
    size = getattr(pattern, "size", None)
    delta = None
    if pattern.kind == "independent":
        delta = float(pattern.client_probs(n).min())
    report = bounds_report(constants, DelaySummary(int(tau_max), float(tau_avg)), size=size, delta=delta)
    try:
        db = delay_bound_for(pattern, n, cfg.rounds)
        report["delay_bound"] = {"value": db.value, "in_expectation": db.in_expectation}
    except NoClosedFormBound:
        report["delay_bound"] = None
    report["pattern"] = cfg.pattern
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsum", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--algorithm")
        p.add_argument("--pattern", help="pattern kind (uniform, independent, cyclic, reshuffled, sine, biased, replay)")
        p.add_argument("--active", type=int, help="clients per round (pattern size)")
        p.add_argument("--delta", type=float, help="participation probability for the independent pattern")
        p.add_argument("--replay", help="JSON-lines schedule for the replay pattern")
        p.add_argument("--clients", type=int, help="number of clients N")
        p.add_argument("--problem", choices=["quadratic", "logistic"])
        p.add_argument("--sigma", type=float, help="gradient noise (quadratic problem)")
        p.add_argument("--rounds", type=int)
        p.add_argument("--local-steps", type=int)
        p.add_argument("--eta-g", type=float)
        p.add_argument("--eta-l", type=float)
        p.add_argument("--schedule", choices=["constant", "sqrt_decay"])
        p.add_argument("--theorem1", action="store_true", help="set rates from measured delays")
        p.add_argument("--seed", type=int)
        p.add_argument("--eval-every", type=int)
        p.add_argument("--output")
        p.add_argument("--format", choices=["csv", "jsonl"])

    run_p = sub.add_parser("run", help="run one configuration")
    add_config_flags(run_p)
    run_p.add_argument("--checkpoint-every", type=int)
    run_p.add_argument("--resume", help="output directory of an interrupted run")

    sweep_p = sub.add_parser("sweep", help="run a grid over one config field and several seeds")
    add_config_flags(sweep_p)
    sweep_p.add_argument("--axis", required=True, help="config field, e.g. algorithm or pattern.probs")
    sweep_p.add_argument("--values", required=True, help="comma-separated values (JSON scalars)")
    sweep_p.add_argument("--seeds", default="0", help="e.g. 0-9 or 0,3,5")

    bounds_p = sub.add_parser("bounds", help="print learning rates and bounds as JSON")
    add_config_flags(bounds_p)
    bounds_p.add_argument("--tau-max", type=int)
    bounds_p.add_argument("--tau-avg", type=float)

    replay_p = sub.add_parser("replay-schedule", help="write or inspect a JSON-lines schedule")
    add_config_flags(replay_p)
    replay_p.add_argument("--input", help="existing schedule to inspect instead of generating one")
    replay_p.add_argument("--schedule-out", help="where to write the generated schedule")
    return parser


def config_from_args(args) -> RunConfig:
    data = RunConfig().to_dict()
    if args.config:
        data.update(RunConfig.load(args.config).to_dict())
    pattern = dict(data["pattern"])
    problem = dict(data["problem"])
    if args.pattern:
        if args.pattern != pattern.get("kind"):
            size = pattern.get("size")
            pattern = {"kind": args.pattern}
            if size is not None and args.pattern in ("uniform", "cyclic", "reshuffled", "sine"):
                pattern["size"] = size
    if args.active is not None:
        pattern["size"] = args.active
    if args.delta is not None:
        pattern["probs"] = args.delta
    if args.replay:
        pattern = {"kind": "replay", "path": args.replay}
    if pattern.get("kind") == "independent" and "probs" not in pattern:
        n = args.clients or problem.get("n_clients", 20)
        pattern["probs"] = pattern.pop("size", 4) / n
    if args.problem and args.problem != problem.get("kind"):
        problem = {"kind": args.problem, "n_clients": problem.get("n_clients", 20), "dim": problem.get("dim", 10)}
        if args.problem == "quadratic":
            problem["radius"] = 3.0
    if args.clients is not None:
        problem["n_clients"] = args.clients
    if args.sigma is not None:
        problem["sigma"] = args.sigma
    data["pattern"], data["problem"] = pattern, problem
    for flag, key in [
        ("algorithm", "algorithm"),
        ("rounds", "rounds"),
        ("local_steps", "local_steps"),
        ("eta_g", "eta_g"),
        ("eta_l", "eta_l"),
        ("schedule", "schedule"),
        ("seed", "seed"),
        ("eval_every", "eval_every"),
        ("output", "output"),
        ("format", "format"),
        ("checkpoint_every", "checkpoint_every"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    if args.theorem1:
        data["theorem1"] = dict(data.get("theorem1") or {}, measure=True)
    return RunConfig.from_dict(data)


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run" and args.resume:
            cfg = RunConfig.load(Path(args.resume) / "config.json")
            summary = execute(cfg, resume=True)
        elif args.command == "run":
            summary = execute(config_from_args(args))
        elif args.command == "sweep":
            cfg = config_from_args(args)
            values = [_parse_value(v) for v in args.values.split(",") if v]
            workers = int(os.environ.get(THREADS_ENV, "1"))
            summary = sweep(cfg, args.axis, values, _parse_seeds(args.seeds), cfg.output, workers)
        elif args.command == "bounds":
            summary = _bounds(config_from_args(args), args.tau_max, args.tau_avg)
        else:
            cfg = config_from_args(args)
            n = cfg.build_problem().n_clients
            if args.input:
                replay = load_replay(args.input)
                schedule = generate_schedule(replay, n, len(replay.sets), Streams(cfg.seed))
            else:
                schedule = generate_schedule(cfg.build_pattern(), n, cfg.rounds, Streams(cfg.seed))
                if args.schedule_out:
                    dump_schedule(schedule, args.schedule_out)
            tracker = delay_stats(schedule, n)
            summary = {"rounds": len(schedule), "tau_max": tracker.tau_max, "tau_avg": tracker.tau_avg}
    except ConfigError as exc:
        print(f"fedsum: configuration error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"fedsum: divergence: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
