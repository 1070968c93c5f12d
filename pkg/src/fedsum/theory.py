"""Learning-rate prescriptions, convergence bounds and delay estimates.

All functions are pure. Logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .participation import (
    DeterministicCyclic,
    IndependentProb,
    PatternSpec,
    ReshuffledCyclic,
    UniformSample,
)


@dataclass(frozen=True)
class ProblemConstants:
    L: float
    sigma: float
    delta_f: float
    F0: float
    n_clients: int
    local_steps: int
    rounds: int

    def __post_init__(self):
        if min(self.L, self.sigma, self.delta_f, self.F0) < 0:
            raise ValueError("problem constants must be non-negative")
        if self.rounds < 1 or self.local_steps < 1 or self.n_clients < 1:
            raise ValueError("rounds, local_steps and n_clients must be >= 1")


@dataclass(frozen=True)
class DelaySummary:
    tau_max: int
    tau_avg: float

    def __post_init__(self):
        if self.tau_max < 0 or self.tau_avg < 0:
            raise ValueError("delays must be non-negative")
        if self.tau_avg > self.tau_max + 1e-12:
            raise ValueError(f"tau_avg={self.tau_avg} exceeds tau_max={self.tau_max}")


def theorem1_rates(c: ProblemConstants, d: DelaySummary) -> tuple[float, float]:
    """Global and local learning rates ``(eta_g, eta_l)``.

    ``tau_max = 0`` (full participation) is treated as 1. With ``sigma = 0``
    the noise branch is unbounded and the smoothness branch is returned.
    """
    if c.L <= 0:
        raise ValueError("L must be positive")
    tau = max(1, d.tau_max)
    eta_g = 1.0 / math.sqrt(tau)
    smooth = 1.0 / (10.0 * math.sqrt(tau) * c.local_steps * c.L)
    denom = max(1.0, d.tau_avg) * c.local_steps * c.rounds * c.L * c.sigma**2
    if denom == 0:
        return eta_g, smooth
    noise = math.sqrt(c.n_clients * tau * c.delta_f) / math.sqrt(denom)
    return eta_g, min(smooth, noise)


def theorem1_bound(c: ProblemConstants, d: DelaySummary) -> float:
    """Upper bound on the average squared gradient norm over ``rounds``."""
    noise = 30.0 * math.sqrt((1.0 + d.tau_avg) * c.L * c.sigma**2 * c.delta_f)
    noise /= math.sqrt(c.n_clients * c.local_steps * c.rounds)
    drift = 20.0 * d.tau_max * (c.L * c.delta_f + c.F0) / c.rounds
    return noise + drift


class NoClosedFormBound(ValueError):
    pass


@dataclass(frozen=True)
class DelayBound:
    value: float
    in_expectation: bool


def delay_bound(
    kind: str,
    n_clients: int,
    rounds: int,
    size: Optional[int] = None,
    delta: Optional[float] = None,
) -> DelayBound:
    """Closed-form bound on ``tau_max`` for the four classical patterns.

    ``kind`` is one of ``uniform``, ``independent``, ``reshuffled`` or
    ``cyclic``; the bound is keyed by pattern kind, not by case number.
    """
    n = n_clients
    if kind == "uniform":
        _need(size, "size")
        return DelayBound(4.0 * n / size * math.log(n * rounds), True)
    if kind == "independent":
        _need(delta, "delta")
        if not 0 < delta <= 1:
            raise ValueError("delta must be in (0, 1]")
        return DelayBound(4.0 / delta * max(math.log(n * rounds), math.log(1.0 / delta)), True)
    if kind == "reshuffled":
        _need(size, "size")
        return DelayBound(4.0 * n / size, True)
    if kind == "cyclic":
        _need(size, "size")
        return DelayBound(2.0 * n / size, False)
    raise NoClosedFormBound(f"no closed-form delay bound for pattern kind {kind!r}")


def delay_bound_for(pattern: PatternSpec, n_clients: int, rounds: int) -> DelayBound:
    if isinstance(pattern, (UniformSample, DeterministicCyclic, ReshuffledCyclic)):
        return delay_bound(pattern.kind, n_clients, rounds, size=pattern.size)
    if isinstance(pattern, IndependentProb):
        delta = float(pattern.client_probs(n_clients).min())
        return delay_bound("independent", n_clients, rounds, delta=delta)
    raise NoClosedFormBound(f"no closed-form delay bound for pattern kind {pattern.kind!r}")


def _need(value, name):
    if value is None or value <= 0:
        raise ValueError(f"{name} must be given and positive")


# Case numbering: 1 uniform sampling, 2 independent participation,
# 3 deterministic cyclic, 4 reshuffled cyclic. Cases 3 and 4 share one rate.
CASE_KINDS = {1: "uniform", 2: "independent", 3: "cyclic", 4: "reshuffled"}


def case_rate(
    case: int, c: ProblemConstants, size: Optional[int] = None, delta: Optional[float] = None
) -> float:
    """Right-hand side of the per-pattern convergence rate."""
    if case not in CASE_KINDS:
        raise ValueError(f"case must be 1-4, got {case}")
    base = c.L * c.sigma**2 * c.delta_f
    drift = c.L * c.delta_f + c.F0
    n, k, t = c.n_clients, c.local_steps, c.rounds
    log_nt = math.log(n * t)
    if case == 2:
        _need(delta, "delta")
        lg = max(log_nt, math.log(1.0 / delta))
        return 60.0 * math.sqrt(base) * lg / math.sqrt(delta * n * k * t) + 80.0 * drift * lg / (delta * t)
    _need(size, "size")
    if case == 1:
        return 60.0 * math.sqrt(base * log_nt) / math.sqrt(size * k * t) + 80.0 * drift * n * log_nt / (size * t)
    return 60.0 * math.sqrt(base) / math.sqrt(size * k * t) + 80.0 * n * drift / (size * t)


def bounds_report(c: ProblemConstants, d: DelaySummary, size=None, delta=None) -> dict:
    eta_g, eta_l = theorem1_rates(c, d)
    out = {
        "constants": c.__dict__.copy(),
        "delays": {"tau_max": d.tau_max, "tau_avg": d.tau_avg},
        "eta_g": eta_g,
        "eta_l": eta_l,
        "theorem1_bound": theorem1_bound(c, d),
    }
    rates = {}
    for case, kind in CASE_KINDS.items():
        try:
            rates[kind] = case_rate(case, c, size=size, delta=delta)
        except ValueError:
            continue
    out["case_rates"] = rates
    return out
