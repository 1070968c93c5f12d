"""Client participation patterns and last-selection / delay tracking.

Clients are indexed ``0..N-1``. A pattern turns a round index into an
:class:`ActiveSet`; :class:`DelayTracker` consumes active sets in round order
and maintains the last-selection times ``a[i]`` and the per-round delays
``tau_t = max_i (t - a[i])``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ConfigError
from .streams import Streams


@dataclass(frozen=True)
class ActiveSet:
    round: int
    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(sorted(set(int(m) for m in self.members)))
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, client: object) -> bool:
        return client in self.members


@dataclass(frozen=True)
class UniformSample:
    """Server samples ``size`` clients uniformly without replacement."""

    size: int
    kind = "uniform"


@dataclass(frozen=True)
class IndependentProb:
    """Each client joins independently; ``probs`` is a scalar or one value per client."""

    probs: Union[float, tuple[float, ...]]
    kind = "independent"

    def __post_init__(self):
        if not isinstance(self.probs, (int, float)):
            object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))

    def client_probs(self, n_clients: int) -> np.ndarray:
        if isinstance(self.probs, tuple):
            p = np.asarray(self.probs, dtype=float)
        else:
            p = np.full(n_clients, float(self.probs))
        return np.clip(p, 0.0, 1.0)


@dataclass(frozen=True)
class DeterministicCyclic:
    """Fixed order ``0..N-1``; each round takes the next ``size`` clients, wrapping around."""

    size: int
    kind = "cyclic"


@dataclass(frozen=True)
class ReshuffledCyclic:
    """Like :class:`DeterministicCyclic` but the order is re-permuted every epoch of N slots."""

    size: int
    kind = "reshuffled"


@dataclass(frozen=True)
class SineProb:
    """Time-varying Bernoulli participation ``(S/N) * (amplitude*sin(pi*t/period) + offset)``."""

    size: int
    period: float = 5.0
    amplitude: float = 0.3
    offset: float = 0.7
    kind = "sine"

    def prob(self, n_clients: int, round_index: int) -> float:
        raw = (self.size / n_clients) * (
            self.amplitude * math.sin(math.pi * round_index / self.period) + self.offset
        )
        return min(max(raw, 0.0), 1.0)


@dataclass(frozen=True)
class BiasedTiers:
    """Tiers of ``tier_size`` clients with probability ``p_start - tier * p_step``."""

    tier_size: int = 11
    p_start: float = 0.5
    p_step: float = 0.05
    kind = "biased"

    def client_probs(self, n_clients: int) -> np.ndarray:
        tiers = np.arange(n_clients) // self.tier_size
        return np.clip(self.p_start - tiers * self.p_step, 0.0, 1.0)


@dataclass(frozen=True)
class Replay:
    """Explicit schedule, one tuple of client indices per round."""

    sets: tuple[tuple[int, ...], ...] = field(repr=False)
    kind = "replay"

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(tuple(int(c) for c in s) for s in self.sets))


PatternSpec = Union[
    UniformSample, IndependentProb, DeterministicCyclic, ReshuffledCyclic, SineProb, BiasedTiers, Replay
]

PATTERN_KINDS = {
    cls.kind: cls
    for cls in (
        UniformSample,
        IndependentProb,
        DeterministicCyclic,
        ReshuffledCyclic,
        SineProb,
        BiasedTiers,
        Replay,
    )
}


def validate_pattern(pattern: PatternSpec, n_clients: int, rounds: int | None = None) -> None:
    """Raise :class:`ConfigError` if ``pattern`` cannot drive ``n_clients`` for ``rounds``."""
    if n_clients < 1:
        raise ConfigError(f"need at least one client, got {n_clients}")
    if isinstance(pattern, (UniformSample, DeterministicCyclic, ReshuffledCyclic, SineProb)):
        if not 1 <= pattern.size <= n_clients:
            raise ConfigError(f"{pattern.kind}: size must be in [1, {n_clients}], got {pattern.size}")
    if isinstance(pattern, SineProb) and pattern.period <= 0:
        raise ConfigError("sine: period must be positive")
    if isinstance(pattern, IndependentProb) and isinstance(pattern.probs, tuple):
        if len(pattern.probs) != n_clients:
            raise ConfigError(
                f"independent: got {len(pattern.probs)} probabilities for {n_clients} clients"
            )
    if isinstance(pattern, BiasedTiers) and pattern.tier_size < 1:
        raise ConfigError("biased: tier_size must be >= 1")
    if isinstance(pattern, Replay):
        if rounds is not None and len(pattern.sets) < rounds:
            raise ConfigError(f"replay schedule has {len(pattern.sets)} rounds, need {rounds}")
        for s in pattern.sets:
            if any(not 0 <= c < n_clients for c in s):
                raise ConfigError(f"replay schedule references a client outside [0, {n_clients})")


def _bernoulli(probs: np.ndarray, rng: np.random.Generator) -> list[int]:
    return np.flatnonzero(rng.random(probs.shape[0]) < probs).tolist()


def _cyclic_block(order_at, n_clients: int, size: int, round_index: int) -> list[int]:
    # positions run continuously through consecutive epochs of length N
    start = round_index * size
    orders = {}
    members = []
    for pos in range(start, start + size):
        epoch, slot = divmod(pos, n_clients)
        if epoch not in orders:
            orders[epoch] = order_at(epoch)
        members.append(int(orders[epoch][slot]))
    return members


def next_active_set(
    pattern: PatternSpec, n_clients: int, round_index: int, streams: Streams
) -> ActiveSet:
    """Active clients for ``round_index``.

    Cyclic and replay schedules are pure functions of the round; the random
    kinds draw only from streams keyed by the round (or epoch), so the result
    does not depend on which rounds were generated before.
    """
    if round_index < 0:
        raise ValueError(f"round must be >= 0, got {round_index}")
    if isinstance(pattern, UniformSample):
        rng = streams.pattern(round_index)
        members = rng.choice(n_clients, size=pattern.size, replace=False).tolist()
    elif isinstance(pattern, IndependentProb):
        members = _bernoulli(pattern.client_probs(n_clients), streams.pattern(round_index))
    elif isinstance(pattern, BiasedTiers):
        members = _bernoulli(pattern.client_probs(n_clients), streams.pattern(round_index))
    elif isinstance(pattern, SineProb):
        probs = np.full(n_clients, pattern.prob(n_clients, round_index))
        members = _bernoulli(probs, streams.pattern(round_index))
    elif isinstance(pattern, DeterministicCyclic):
        members = _cyclic_block(lambda e: range(n_clients), n_clients, pattern.size, round_index)
    elif isinstance(pattern, ReshuffledCyclic):
        members = _cyclic_block(
            lambda e: streams.epoch(e).permutation(n_clients), n_clients, pattern.size, round_index
        )
    elif isinstance(pattern, Replay):
        if round_index >= len(pattern.sets):
            raise ConfigError(
                f"replay schedule exhausted at round {round_index} ({len(pattern.sets)} rounds available)"
            )
        members = pattern.sets[round_index]
    else:
        raise TypeError(f"unsupported pattern {pattern!r}")
    return ActiveSet(round_index, tuple(members))


def generate_schedule(
    pattern: PatternSpec, n_clients: int, rounds: int, streams: Streams
) -> list[ActiveSet]:
    validate_pattern(pattern, n_clients, rounds)
    return [next_active_set(pattern, n_clients, t, streams) for t in range(rounds)]


class DelayTracker:
    """Incremental last-selection times and per-round delays.

    ``last_selected[i]`` starts at -1; recording round ``t`` sets it to ``t``
    for every active client. Never-selected clients therefore contribute a gap
    of ``t + 1``.
    """

    def __init__(self, n_clients: int, keep_history: bool = True):
        if n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        self.n_clients = n_clients
        self.last_selected = np.full(n_clients, -1, dtype=np.int64)
        self.tau_history: list[int] = []
        self.tau_max = 0
        self._tau_sum = 0
        self.keep_history = keep_history
        self._snapshots: list[np.ndarray] = []

    @property
    def rounds(self) -> int:
        return len(self.tau_history)

    @property
    def tau_avg(self) -> float:
        if not self.tau_history:
            return 0.0
        return self._tau_sum / len(self.tau_history)

    def record_round(self, active: ActiveSet) -> int:
        t = active.round
        if t != self.rounds:
            raise ValueError(f"rounds must be recorded in order: expected {self.rounds}, got {t}")
        members = list(active.members)
        if members and not (0 <= members[0] and members[-1] < self.n_clients):
            raise ValueError(f"active set {members} has clients outside [0, {self.n_clients})")
        self.last_selected[members] = t
        tau = int(t - self.last_selected.min())
        self.tau_history.append(tau)
        self._tau_sum += tau
        self.tau_max = max(self.tau_max, tau)
        if self.keep_history:
            self._snapshots.append(self.last_selected.copy())
        return tau

    def last_selection_at(self, t: int) -> np.ndarray:
        """The vector ``a[:, t]`` as it was right after round ``t`` was recorded."""
        if not self.keep_history:
            raise RuntimeError("tracker was created with keep_history=False")
        if not 0 <= t < self.rounds:
            raise ValueError(f"round {t} not recorded (have {self.rounds})")
        return self._snapshots[t].copy()

    def min_last_selection(self, k: int) -> int:
        """``min_i a[i, k + tau_max]``; always >= k on a consistent trace."""
        t = k + self.tau_max
        if k < 0 or t >= self.rounds:
            raise ValueError(
                f"insufficient history: need round {t} recorded, have {self.rounds} rounds"
            )
        return int(self.last_selection_at(t).min())

    def summary(self) -> dict:
        return {
            "tau_max": int(self.tau_max),
            "tau_avg": float(self.tau_avg),
            "last_selected": self.last_selected.tolist(),
            "tau_history": list(self.tau_history),
        }

    def state_dict(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "keep_history": self.keep_history,
            "last_selected": self.last_selected.tolist(),
            "tau_history": list(self.tau_history),
            "snapshots": [s.tolist() for s in self._snapshots],
        }

    @classmethod
    def from_state(cls, state: dict) -> "DelayTracker":
        tracker = cls(state["n_clients"], keep_history=state["keep_history"])
        tracker.last_selected = np.asarray(state["last_selected"], dtype=np.int64)
        tracker.tau_history = [int(v) for v in state["tau_history"]]
        tracker._tau_sum = sum(tracker.tau_history)
        tracker.tau_max = max(tracker.tau_history, default=0)
        tracker._snapshots = [np.asarray(s, dtype=np.int64) for s in state["snapshots"]]
        return tracker


def delay_stats(schedule: Iterable[ActiveSet], n_clients: int) -> DelayTracker:
    tracker = DelayTracker(n_clients)
    for active in schedule:
        tracker.record_round(active)
    return tracker


def load_replay(path: str | Path) -> Replay:
    """Read a JSON-lines schedule: one array of client indices per line."""
    sets = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            if not isinstance(row, list) or not all(isinstance(c, int) for c in row):
                raise ConfigError(f"{path}:{lineno}: expected an array of client indices")
            sets.append(tuple(row))
    return Replay(tuple(sets))


def dump_schedule(schedule: Sequence[ActiveSet], path: str | Path) -> None:
    with open(path, "w") as fh:
        for active in schedule:
            fh.write(json.dumps(list(active.members)) + "\n")


def pattern_to_dict(pattern: PatternSpec) -> dict:
    out = {"kind": pattern.kind}
    for name in pattern.__dataclass_fields__:
        value = getattr(pattern, name)
        if isinstance(value, tuple):
            value = [list(v) if isinstance(v, tuple) else v for v in value]
        out[name] = value
    return out


def pattern_from_dict(data: dict) -> PatternSpec:
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in PATTERN_KINDS:
        raise ConfigError(f"unknown pattern kind {kind!r}; choose from {sorted(PATTERN_KINDS)}")
    if kind == "replay" and "path" in data:
        return load_replay(data.pop("path"))
    if kind == "independent" and "delta" in data:
        data["probs"] = data.pop("delta")
    try:
        return PATTERN_KINDS[kind](**data)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for pattern {kind!r}: {exc}") from None
