"""Round engines for the FedSUM family and two baselines.

Every engine takes the server state, the per-client persistent state, the
active set for the round, the objective, hyperparameters and the random
streams, mutates the states in place and returns a :class:`RoundReport`.

The FedSUM variants share one server step::

    y <- y + sum_{i in S_t} delta_i
    x <- x - (eta_g * eta_l * K / N) * y

and differ only in how an active client computes its correction direction.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DivergenceError
from .metrics import UNITS_PER_CLIENT
from .participation import ActiveSet, DelayTracker
from .problems import GlobalObjective
from .streams import Streams

DIVERGENCE_LIMIT = 1e12


@dataclass
class HyperParams:
    eta_g: float
    eta_l: float
    local_steps: int
    schedule: str = "constant"

    def __post_init__(self):
        if self.eta_g <= 0 or self.eta_l <= 0:
            raise ConfigError("learning rates must be positive")
        if self.local_steps < 1:
            raise ConfigError("local_steps must be >= 1")
        if self.schedule not in ("constant", "sqrt_decay"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def local_rate(self, t: int) -> float:
        if self.schedule == "sqrt_decay":
            return self.eta_l / math.sqrt(t / 10 + 1)
        return self.eta_l


@dataclass
class ServerState:
    """Global model ``x`` and accumulated direction ``y`` (the server control ``c`` for SCAFFOLD)."""

    x: np.ndarray
    y: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, x0: np.ndarray) -> "ServerState":
        x0 = np.asarray(x0, dtype=float)
        return cls(x=x0.copy(), y=np.zeros_like(x0))


@dataclass
class ClientState:
    """``h``: last uploaded aggregate gradient (SCAFFOLD control variate);
    ``z``/``a``: model received and round of the last selection (FedSUM-CR)."""

    h: np.ndarray
    z: np.ndarray
    a: int = -1

    @classmethod
    def initial(cls, x0: np.ndarray) -> "ClientState":
        x0 = np.asarray(x0, dtype=float)
        return cls(h=np.zeros_like(x0), z=x0.copy())


def initial_clients(n_clients: int, x0: np.ndarray) -> list[ClientState]:
    return [ClientState.initial(x0) for _ in range(n_clients)]


@dataclass
class RoundReport:
    round: int
    active: int
    tau: int
    loss: float
    grad_norm_sq: float
    downlink: int
    uplink: int
    eta_l: float
    wall_time: float = 0.0


# client id -> round -> list of the K stochastic gradients computed that round
GradLog = dict[int, dict[int, list[np.ndarray]]]


def _average(grads: list[np.ndarray]) -> np.ndarray:
    total = grads[0].copy()
    for g in grads[1:]:
        total += g
    return total / len(grads)


def _check_finite(x: np.ndarray, algorithm: str, t: int) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"{algorithm}: non-finite model after round {t}")
    norm = float(np.linalg.norm(x))
    if norm > DIVERGENCE_LIMIT:
        raise DivergenceError(
            f"{algorithm}: ||x|| = {norm:.3e} exceeds {DIVERGENCE_LIMIT:.0e} after round {t}; "
            "learning rates are likely too large"
        )


def _evaluate(objective: GlobalObjective, x: np.ndarray, evaluate: bool) -> tuple[float, float]:
    if not evaluate:
        return math.nan, math.nan
    g = objective.grad(x)
    return objective.value(x), float(g @ g)


def _begin(server, active: ActiveSet, objective, evaluate):
    if active.round != server.t:
        raise ValueError(f"active set is for round {active.round}, server is at round {server.t}")
    loss, gn = _evaluate(objective, server.x, evaluate)
    return time.perf_counter(), loss, gn


def _finish(name, server, active, hp, started, loss, gn) -> RoundReport:
    _check_finite(server.x, name, server.t)
    down, up = UNITS_PER_CLIENT[name]
    t = server.t
    server.t += 1
    return RoundReport(
        round=t,
        active=len(active),
        tau=-1,
        loss=loss,
        grad_norm_sq=gn,
        downlink=down * len(active),
        uplink=up * len(active),
        eta_l=hp.local_rate(t),
        wall_time=time.perf_counter() - started,
    )


def _server_step(server: ServerState, deltas: list[np.ndarray], hp: HyperParams, n: int) -> None:
    for delta in deltas:  # ascending client order
        server.y = server.y + delta
    coef = hp.eta_g * hp.local_rate(server.t) * hp.local_steps / n
    server.x = server.x - coef * server.y


def _local_sgd(obj, x_start, rng, steps, step_size, correction):
    """``steps`` corrected SGD steps from ``x_start``; returns the gradients used."""
    x = x_start.copy()
    grads = []
    for _ in range(steps):
        g = obj.stoch_grad(x, rng)
        grads.append(g)
        x = x - step_size * (g + correction)
    return x, grads


def _log(grad_log: Optional[GradLog], i: int, t: int, grads: list[np.ndarray]) -> None:
    if grad_log is not None:
        grad_log.setdefault(i, {})[t] = [g.copy() for g in grads]


def run_round_fedsum_b(
    server: ServerState,
    clients: list[ClientState],
    active: ActiveSet,
    objective: GlobalObjective,
    hp: HyperParams,
    streams: Streams,
    evaluate: bool = True,
    grad_log: Optional[GradLog] = None,
) -> RoundReport:
    """FedSUM-B: K minibatch gradients at the received model, no local movement."""
    started, loss, gn = _begin(server, active, objective, evaluate)
    t = server.t
    deltas = []
    for i in active:
        rng = streams.grad(t, i)
        obj = objective.clients[i]
        grads = [obj.stoch_grad(server.x, rng) for _ in range(hp.local_steps)]
        fresh = _average(grads)
        deltas.append(fresh - clients[i].h)
        clients[i].h = fresh
        _log(grad_log, i, t, grads)
    _server_step(server, deltas, hp, objective.n_clients)
    return _finish("fedsum_b", server, active, hp, started, loss, gn)


def _fedsum_local(server, clients, i, correction, objective, hp, streams, grad_log):
    t = server.t
    n = objective.n_clients
    _, grads = _local_sgd(
        objective.clients[i],
        server.x,
        streams.grad(t, i),
        hp.local_steps,
        hp.local_rate(t) / n,
        correction,
    )
    # N (x - x_K) / (eta_l K) - y_i equals the plain average of the local gradients
    fresh = _average(grads)
    delta = fresh - clients[i].h
    clients[i].h = fresh
    _log(grad_log, i, t, grads)
    return delta


def run_round_fedsum(
    server: ServerState,
    clients: list[ClientState],
    active: ActiveSet,
    objective: GlobalObjective,
    hp: HyperParams,
    streams: Streams,
    evaluate: bool = True,
    grad_log: Optional[GradLog] = None,
) -> RoundReport:
    """FedSUM: clients correct local steps with ``y_i = y^{(t-1)} - h_i`` broadcast by the server."""
    started, loss, gn = _begin(server, active, objective, evaluate)
    deltas = []
    for i in active:
        correction = server.y - clients[i].h
        deltas.append(_fedsum_local(server, clients, i, correction, objective, hp, streams, grad_log))
    _server_step(server, deltas, hp, objective.n_clients)
    return _finish("fedsum", server, active, hp, started, loss, gn)


def cr_correction(client: ClientState, x: np.ndarray, t: int, hp: HyperParams, n: int) -> np.ndarray:
    """Correction rebuilt from the stored model ``z`` and last-selection round ``a``."""
    gap = t - client.a
    if gap <= 0:
        raise AssertionError(f"last selection {client.a} is not before round {t}")
    scale = n / (hp.eta_g * hp.local_rate(t) * hp.local_steps)
    return scale * (client.z - x) / gap - client.h


def run_round_fedsum_cr(
    server: ServerState,
    clients: list[ClientState],
    active: ActiveSet,
    objective: GlobalObjective,
    hp: HyperParams,
    streams: Streams,
    evaluate: bool = True,
    grad_log: Optional[GradLog] = None,
) -> RoundReport:
    """FedSUM-CR: the correction is reconstructed locally, so only ``x`` is broadcast."""
    started, loss, gn = _begin(server, active, objective, evaluate)
    t = server.t
    n = objective.n_clients
    deltas = []
    for i in active:
        correction = cr_correction(clients[i], server.x, t, hp, n)
        deltas.append(_fedsum_local(server, clients, i, correction, objective, hp, streams, grad_log))
        clients[i].z = server.x.copy()
        clients[i].a = t
    _server_step(server, deltas, hp, n)
    return _finish("fedsum_cr", server, active, hp, started, loss, gn)


def run_round_fedavg(
    server: ServerState,
    clients: list[ClientState],
    active: ActiveSet,
    objective: GlobalObjective,
    hp: HyperParams,
    streams: Streams,
    evaluate: bool = True,
    grad_log: Optional[GradLog] = None,
) -> RoundReport:
    """FedAvg over the active clients: average their model deltas, scale by ``eta_g``."""
    started, loss, gn = _begin(server, active, objective, evaluate)
    t = server.t
    eta = hp.local_rate(t)
    zero = np.zeros_like(server.x)
    updates = []
    for i in active:
        x_end, grads = _local_sgd(objective.clients[i], server.x, streams.grad(t, i), hp.local_steps, eta, zero)
        updates.append(x_end - server.x)
        _log(grad_log, i, t, grads)
    if updates:
        server.x = server.x + hp.eta_g * _average(updates)
    return _finish("fedavg", server, active, hp, started, loss, gn)


def run_round_scaffold(
    server: ServerState,
    clients: list[ClientState],
    active: ActiveSet,
    objective: GlobalObjective,
    hp: HyperParams,
    streams: Streams,
    evaluate: bool = True,
    grad_log: Optional[GradLog] = None,
) -> RoundReport:
    """SCAFFOLD with option-II control variates; ``server.y`` holds the server control."""
    started, loss, gn = _begin(server, active, objective, evaluate)
    t = server.t
    n = objective.n_clients
    eta = hp.local_rate(t)
    model_updates, control_updates = [], []
    for i in active:
        c_i = clients[i].h
        x_end, grads = _local_sgd(
            objective.clients[i], server.x, streams.grad(t, i), hp.local_steps, eta, server.y - c_i
        )
        c_new = c_i - server.y + (server.x - x_end) / (hp.local_steps * eta)
        model_updates.append(x_end - server.x)
        control_updates.append(c_new - c_i)
        clients[i].h = c_new
        _log(grad_log, i, t, grads)
    if model_updates:
        server.x = server.x + hp.eta_g * _average(model_updates)
        total = control_updates[0].copy()
        for dc in control_updates[1:]:
            total += dc
        server.y = server.y + total / n
    return _finish("scaffold", server, active, hp, started, loss, gn)


ROUND_ENGINES: dict[str, Callable[..., RoundReport]] = {
    "fedsum_b": run_round_fedsum_b,
    "fedsum": run_round_fedsum,
    "fedsum_cr": run_round_fedsum_cr,
    "fedavg": run_round_fedavg,
    "scaffold": run_round_scaffold,
}
FEDSUM_FAMILY = ("fedsum_b", "fedsum", "fedsum_cr")


def reconstruct_y_direct(grad_log: GradLog, tracker: DelayTracker, t: Optional[int] = None) -> np.ndarray:
    """``y^{(t)}`` summed directly from each client's gradients at its last selection <= t."""
    if t is None:
        t = tracker.rounds - 1
    last = tracker.last_selection_at(t)
    total = None
    for i in range(tracker.n_clients):
        a = int(last[i])
        if a < 0:
            continue
        try:
            grads = grad_log[i][a]
        except KeyError:
            raise KeyError(f"gradient log has no entry for client {i} at round {a}") from None
        term = _average(grads)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no client has participated yet")
    return total
