"""Round-sequential driver tying schedule, engine, delay tracker and ledger together."""

from __future__ import annotations

import json
import math
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .algorithms import (
    ROUND_ENGINES,
    ClientState,
    GradLog,
    HyperParams,
    RoundReport,
    ServerState,
    initial_clients,
)
from .errors import ConfigError
from .metrics import CommLedger, TraceRow
from .participation import DelayTracker, PatternSpec, next_active_set, validate_pattern
from .problems import GlobalObjective
from .streams import Streams


class Simulation:
    def __init__(
        self,
        objective: GlobalObjective,
        algorithm: str,
        hp: HyperParams,
        pattern: PatternSpec,
        seed: int,
        rounds: int,
        eval_every: int = 1,
        keep_grad_log: bool = False,
        keep_y_history: bool = False,
    ):
        if algorithm not in ROUND_ENGINES:
            raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {sorted(ROUND_ENGINES)}")
        if rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        validate_pattern(pattern, objective.n_clients, rounds)
        self.objective = objective
        self.algorithm = algorithm
        self.engine = ROUND_ENGINES[algorithm]
        self.hp = hp
        self.pattern = pattern
        self.seed = seed
        self.rounds = rounds
        self.eval_every = eval_every
        self.streams = Streams(seed)
        self.server = ServerState.initial(objective.x0)
        self.clients = initial_clients(objective.n_clients, objective.x0)
        self.tracker = DelayTracker(objective.n_clients)
        self.ledger = CommLedger()
        self.rows: list[TraceRow] = []
        self.grad_log: Optional[GradLog] = {} if keep_grad_log else None
        self.y_history: Optional[list[np.ndarray]] = [] if keep_y_history else None

    @property
    def t(self) -> int:
        return self.server.t

    @property
    def done(self) -> bool:
        return self.server.t >= self.rounds

    def step(self) -> RoundReport:
        if self.done:
            raise RuntimeError("simulation already finished")
        t = self.server.t
        active = next_active_set(self.pattern, self.objective.n_clients, t, self.streams)
        tau = self.tracker.record_round(active)
        evaluate = t % self.eval_every == 0
        report = self.engine(
            self.server,
            self.clients,
            active,
            self.objective,
            self.hp,
            self.streams,
            evaluate=evaluate,
            grad_log=self.grad_log,
        )
        report.tau = tau
        cum_down, cum_up = self.ledger.record(self.algorithm, len(active))
        if self.y_history is not None:
            self.y_history.append(self.server.y.copy())
        if evaluate:
            self.rows.append(
                TraceRow(
                    round=t,
                    active=report.active,
                    tau=tau,
                    loss=report.loss,
                    grad_norm_sq=report.grad_norm_sq,
                    cum_down=cum_down,
                    cum_up=cum_up,
                    eta_l=report.eta_l,
                )
            )
        return report

    def run(self, until: Optional[int] = None) -> list[TraceRow]:
        """Advance to round ``until`` (default: the end) and return the trace so far."""
        stop = self.rounds if until is None else min(until, self.rounds)
        while self.server.t < stop:
            self.step()
        return self.rows

    def summary(self) -> dict:
        g = self.objective.grad(self.server.x)
        grad_norms = [r.grad_norm_sq for r in self.rows]
        out = {
            "algorithm": self.algorithm,
            "rounds_completed": self.server.t,
            "final_grad_norm_sq": float(g @ g),
            "final_loss": self.objective.value(self.server.x),
            "avg_grad_norm_sq": float(np.mean(grad_norms)) if grad_norms else math.nan,
            "tau_max": int(self.tracker.tau_max),
            "tau_avg": float(self.tracker.tau_avg),
            "cum_down": self.ledger.total_down,
            "cum_up": self.ledger.total_up,
            "total_active": int(sum(r.active for r in self.rows)) if self.eval_every == 1 else None,
        }
        if self.objective.optimum is not None:
            out["dist_to_opt"] = float(np.linalg.norm(self.server.x - self.objective.optimum))
        return out

    def save_checkpoint(self, path: str | Path) -> Path:
        """Write ``state.json`` and ``arrays.npz`` into directory ``path``.

        Random streams are keyed by round, so the round index is the only RNG state.
        """
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        state = {
            "algorithm": self.algorithm,
            "hp": asdict(self.hp),
            "seed": self.seed,
            "rounds": self.rounds,
            "eval_every": self.eval_every,
            "t": self.server.t,
            "client_a": [c.a for c in self.clients],
            "tracker": self.tracker.state_dict(),
            "ledger": self.ledger.state_dict(),
            "rows": [asdict(r) for r in self.rows],
        }
        np.savez(
            path / "arrays.npz",
            x=self.server.x,
            y=self.server.y,
            h=np.stack([c.h for c in self.clients]),
            z=np.stack([c.z for c in self.clients]),
        )
        (path / "state.json").write_text(json.dumps(state, indent=1))
        return path

    @classmethod
    def load_checkpoint(
        cls, path: str | Path, objective: GlobalObjective, pattern: PatternSpec
    ) -> "Simulation":
        path = Path(path)
        state = json.loads((path / "state.json").read_text())
        sim = cls(
            objective,
            state["algorithm"],
            HyperParams(**state["hp"]),
            pattern,
            state["seed"],
            state["rounds"],
            eval_every=state["eval_every"],
        )
        with np.load(path / "arrays.npz") as arrays:
            sim.server = ServerState(x=arrays["x"].copy(), y=arrays["y"].copy(), t=state["t"])
            sim.clients = [
                ClientState(h=h.copy(), z=z.copy(), a=int(a))
                for h, z, a in zip(arrays["h"], arrays["z"], state["client_a"])
            ]
        sim.tracker = DelayTracker.from_state(state["tracker"])
        sim.ledger = CommLedger.from_state(state["ledger"])
        sim.rows = [TraceRow(**r) for r in state["rows"]]
        return sim
