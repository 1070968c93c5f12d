"""Run configuration: JSON schema, validation, and construction of run objects."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .algorithms import ROUND_ENGINES, FEDSUM_FAMILY, HyperParams
from .errors import ConfigError
from .participation import (
    PatternSpec,
    delay_stats,
    generate_schedule,
    pattern_from_dict,
    validate_pattern,
)
from .problems import GlobalObjective, problem_from_dict
from .streams import Streams
from .theory import DelaySummary, ProblemConstants, theorem1_bound, theorem1_rates


def _default_pattern():
    return {"kind": "uniform", "size": 4}


def _default_problem():
    return {"kind": "logistic", "n_clients": 20, "dim": 10, "alpha": 0.1}


@dataclass
class RunConfig:
    """Everything needed to reproduce one run.

    ``theorem1`` switches on automatic rates: ``{"measure": true}`` derives
    ``(tau_max, tau_avg)`` from the generated schedule, otherwise both must
    be given. ``delta_f`` may be supplied there when the problem has no
    known optimum.
    """

    algorithm: str = "fedsum"
    pattern: dict = field(default_factory=_default_pattern)
    problem: dict = field(default_factory=_default_problem)
    eta_g: float = 1.0
    eta_l: float = 0.01
    local_steps: int = 10
    schedule: str = "sqrt_decay"
    theorem1: Optional[dict] = None
    seed: int = 0
    rounds: int = 2000
    eval_every: int = 1
    output: str = "runs/run"
    format: str = "csv"
    checkpoint_every: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(data))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> None:
        if self.algorithm not in ROUND_ENGINES:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {sorted(ROUND_ENGINES)}")
        if self.format not in ("csv", "jsonl"):
            raise ConfigError(f"format must be csv or jsonl, got {self.format!r}")
        if self.rounds < 1 or self.eval_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("rounds and eval_every must be >= 1, checkpoint_every >= 0")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        self.hyperparams()
        spec = problem_from_dict(self.problem)
        pattern = self.build_pattern()
        validate_pattern(pattern, spec.n_clients, self.rounds)
        if self.theorem1 is not None:
            if self.algorithm not in FEDSUM_FAMILY:
                raise ConfigError("theorem1 rates apply to the FedSUM family only")
            t1 = self.theorem1
            if not t1.get("measure") and not {"tau_max", "tau_avg"} <= set(t1):
                raise ConfigError("theorem1 needs either measure=true or both tau_max and tau_avg")

    def set_path(self, dotted: str, value: Any) -> None:
        """Assign ``value`` to a config field addressed as ``a`` or ``a.b``."""
        head, _, rest = dotted.partition(".")
        if head not in {f.name for f in fields(self)}:
            raise ConfigError(f"unknown config field {head!r}")
        if not rest:
            setattr(self, head, value)
            return
        target = getattr(self, head)
        if not isinstance(target, dict):
            raise ConfigError(f"config field {head!r} has no sub-fields")
        target[rest] = value

    def build_pattern(self) -> PatternSpec:
        return pattern_from_dict(self.pattern)

    def build_problem(self) -> GlobalObjective:
        return problem_from_dict(self.problem).build()

    def hyperparams(self) -> HyperParams:
        return HyperParams(self.eta_g, self.eta_l, self.local_steps, self.schedule)


def theorem1_setup(cfg: RunConfig, objective: GlobalObjective) -> tuple[HyperParams, ProblemConstants, DelaySummary]:
    """Rates from the theorem for this config; the schedule is generated up front when measuring."""
    t1 = cfg.theorem1 or {}
    pattern = cfg.build_pattern()
    if t1.get("measure"):
        tracker = delay_stats(
            generate_schedule(pattern, objective.n_clients, cfg.rounds, Streams(cfg.seed)),
            objective.n_clients,
        )
        delays = DelaySummary(tracker.tau_max, tracker.tau_avg)
    else:
        delays = DelaySummary(int(t1["tau_max"]), float(t1["tau_avg"]))
    delta_f = t1.get("delta_f", objective.delta_f)
    if delta_f is None:
        raise ConfigError("theorem1 mode needs delta_f for problems without a known optimum")
    constants = ProblemConstants(
        L=objective.L,
        sigma=objective.sigma,
        delta_f=float(delta_f),
        F0=objective.F0,
        n_clients=objective.n_clients,
        local_steps=cfg.local_steps,
        rounds=cfg.rounds,
    )
    eta_g, eta_l = theorem1_rates(constants, delays)
    return HyperParams(eta_g, eta_l, cfg.local_steps, "constant"), constants, delays


def theorem1_check(avg_grad_norm_sq: float, constants: ProblemConstants, delays: DelaySummary) -> dict:
    bound = theorem1_bound(constants, delays)
    return {"bound": bound, "bound_pass": bool(avg_grad_norm_sq <= bound)}
