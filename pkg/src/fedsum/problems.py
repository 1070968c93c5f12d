"""Synthetic client objectives with exact and stochastic gradients.

Two families are provided. Quadratic clients ``0.5 (x-b)^T A (x-b)`` have
closed-form constants and are the workhorse for exact-convergence checks.
Logistic clients are built on Dirichlet-partitioned synthetic data and
stand in for a heterogeneous classification task.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


class ClientObjective(Protocol):
    dim: int
    smoothness: float
    sigma: float

    def value(self, x: np.ndarray) -> float: ...

    def grad(self, x: np.ndarray) -> np.ndarray: ...

    def stoch_grad(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


class QuadraticClient:
    """``f(x) = 0.5 (x - center)^T A (x - center)`` with isotropic Gaussian gradient noise.

    Noise has per-coordinate variance ``sigma**2 / dim`` so that
    ``E||noise||^2 = sigma**2`` exactly.
    """

    def __init__(self, center, curvature=None, sigma: float = 0.0):
        self.center = np.asarray(center, dtype=float).reshape(-1)
        self.dim = self.center.shape[0]
        if curvature is None:
            self.curvature = None
            self.smoothness = 1.0
        else:
            a = np.asarray(curvature, dtype=float)
            if a.shape != (self.dim, self.dim):
                raise ValueError(f"curvature must be {self.dim}x{self.dim}, got {a.shape}")
            if not np.allclose(a, a.T):
                raise ValueError("curvature must be symmetric")
            eig = np.linalg.eigvalsh(a)
            if eig[0] < -1e-12:
                raise ValueError("curvature must be positive semidefinite")
            self.curvature = a
            self.smoothness = float(eig[-1])
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.sigma = float(sigma)
        self._noise_scale = self.sigma / np.sqrt(self.dim)

    def _apply(self, v: np.ndarray) -> np.ndarray:
        return v if self.curvature is None else self.curvature @ v

    def value(self, x):
        r = np.asarray(x, dtype=float) - self.center
        return 0.5 * float(r @ self._apply(r))

    def grad(self, x):
        return self._apply(np.asarray(x, dtype=float) - self.center)

    def stoch_grad(self, x, rng):
        g = self.grad(x)
        if self.sigma == 0.0:
            return g
        return g + self._noise_scale * rng.standard_normal(self.dim)


class LogisticClient:
    """L2-regularized logistic loss on a local dataset with +-1 labels.

    The stochastic gradient is the gradient on ``batch_size`` rows drawn
    uniformly without replacement.
    """

    def __init__(self, features, labels, l2_reg: float = 0.0, batch_size: int = 1):
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=float).reshape(-1)
        n, self.dim = self.features.shape
        if n == 0:
            raise ValueError("client has no samples")
        if self.labels.shape[0] != n or not np.all(np.abs(self.labels) == 1):
            raise ValueError("labels must be a +-1 vector matching features")
        if l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")
        self.l2_reg = float(l2_reg)
        self.batch_size = min(int(batch_size), n)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        gram_max = float(np.linalg.eigvalsh(self.features.T @ self.features)[-1])
        self.smoothness = gram_max / (4 * n) + self.l2_reg
        # per-sample loss gradients are bounded by ||a_j||, so this bounds the minibatch variance
        row_sq = np.einsum("ij,ij->i", self.features, self.features)
        if self.batch_size == n:
            self.sigma = 0.0
        else:
            self.sigma = float(np.sqrt(row_sq.max() / self.batch_size))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def _loss_grad(self, x, rows=None):
        a = self.features if rows is None else self.features[rows]
        y = self.labels if rows is None else self.labels[rows]
        margins = y * (a @ x)
        # d/dm log(1 + exp(-m)) = -sigmoid(-m)
        weights = -y * _sigmoid(-margins)
        return a.T @ weights / a.shape[0] + self.l2_reg * x

    def value(self, x):
        x = np.asarray(x, dtype=float)
        margins = self.labels * (self.features @ x)
        return float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * self.l2_reg * (x @ x))

    def grad(self, x):
        return self._loss_grad(np.asarray(x, dtype=float))

    def stoch_grad(self, x, rng):
        if self.batch_size == self.n_samples:
            return self.grad(x)
        rows = rng.choice(self.n_samples, size=self.batch_size, replace=False)
        return self._loss_grad(np.asarray(x, dtype=float), rows)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def stoch_grad(obj: ClientObjective, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("stochastic gradient requested at a non-finite point")
    return obj.stoch_grad(x, rng)


class GlobalObjective:
    """Average ``f(x) = (1/N) sum_i f_i(x)`` plus the constants used by the rate formulas."""

    def __init__(
        self,
        clients: Sequence[ClientObjective],
        x0=None,
        f_star: Optional[float] = None,
        optimum=None,
        delta_f: Optional[float] = None,
        spec: Optional[dict] = None,
    ):
        if not clients:
            raise ValueError("need at least one client")
        self.clients = list(clients)
        self.dim = self.clients[0].dim
        if any(c.dim != self.dim for c in self.clients):
            raise ValueError("all clients must share one dimension")
        self.x0 = np.zeros(self.dim) if x0 is None else np.asarray(x0, dtype=float).copy()
        self.f_star = f_star
        self.optimum = None if optimum is None else np.asarray(optimum, dtype=float)
        self.L = max(c.smoothness for c in self.clients)
        self.sigma = max(c.sigma for c in self.clients)
        self.F0 = float(np.mean([np.sum(c.grad(self.x0) ** 2) for c in self.clients]))
        if delta_f is not None:
            self.delta_f = float(delta_f)
        elif f_star is not None:
            self.delta_f = self.value(self.x0) - f_star
        else:
            self.delta_f = None
        self.spec = spec

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def value(self, x) -> float:
        return float(np.mean([c.value(x) for c in self.clients]))

    def grad(self, x) -> np.ndarray:
        total = np.zeros(self.dim)
        for c in self.clients:
            total += c.grad(x)
        return total / self.n_clients

    def client_smoothness(self) -> list[float]:
        return [c.smoothness for c in self.clients]


def quadratic_objective(centers, sigma: float = 0.0, curvatures=None, x0=None, spec=None) -> GlobalObjective:
    """Build the global objective for explicit quadratic clients, solving for ``x*`` and ``f*``."""
    centers = np.asarray(centers, dtype=float)
    if centers.ndim == 1:
        centers = centers[:, None]
    n, d = centers.shape
    if curvatures is None:
        clients = [QuadraticClient(b, sigma=sigma) for b in centers]
        optimum = centers.mean(axis=0)
    else:
        clients = [QuadraticClient(b, a, sigma=sigma) for b, a in zip(centers, curvatures)]
        a_sum = sum(np.asarray(a, dtype=float) for a in curvatures)
        rhs = sum(np.asarray(a, dtype=float) @ b for a, b in zip(curvatures, centers))
        try:
            optimum = np.linalg.solve(a_sum, rhs)
        except np.linalg.LinAlgError:
            optimum = None
    f_star = None
    if optimum is not None:
        f_star = float(np.mean([c.value(optimum) for c in clients]))
    return GlobalObjective(clients, x0=x0, f_star=f_star, optimum=optimum, spec=spec)


@dataclass
class QuadraticSpec:
    n_clients: int
    dim: int
    radius: float
    sigma: float = 0.0
    optimum: float = 1.0
    seed: int = 0
    kind: str = "quadratic"

    def build(self) -> GlobalObjective:
        return make_quadratic_ensemble(
            self.n_clients,
            self.dim,
            self.radius,
            self.sigma,
            np.random.default_rng(self.seed),
            optimum=np.full(self.dim, float(self.optimum)),
            spec=asdict(self),
        )


def make_quadratic_ensemble(
    n_clients: int,
    dim: int,
    radius: float,
    sigma: float,
    rng: np.random.Generator,
    optimum=None,
    x0=None,
    spec=None,
) -> GlobalObjective:
    """Identity-curvature quadratics with centers spread around ``optimum``.

    Center offsets are drawn on the sphere of the given radius and then
    recentered to sum to zero, so ``x* = optimum`` and ``f*`` are exact.
    """
    if n_clients < 1 or dim < 1:
        raise ConfigError("n_clients and dim must be >= 1")
    if radius < 0 or sigma < 0:
        raise ConfigError("radius and sigma must be >= 0")
    optimum = np.ones(dim) if optimum is None else np.asarray(optimum, dtype=float)
    offsets = rng.standard_normal((n_clients, dim))
    norms = np.linalg.norm(offsets, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    offsets = radius * offsets / norms
    offsets -= offsets.mean(axis=0)
    centers = optimum + offsets
    obj = quadratic_objective(centers, sigma=sigma, x0=x0, spec=spec)
    obj.optimum = optimum.copy()
    return obj


def dirichlet_partition(
    num_classes: int,
    n_clients: int,
    alpha: float,
    samples_per_class,
    rng: np.random.Generator,
    max_attempts: int = 10_000,
) -> np.ndarray:
    """Split each class across clients with a Dirichlet(alpha) draw.

    Returns an ``(n_clients, num_classes)`` integer table of sample counts.
    Draws that leave some client with no samples are redrawn.
    """
    if alpha <= 0:
        raise ConfigError("alpha must be > 0")
    if n_clients < 1 or num_classes < 1:
        raise ConfigError("n_clients and num_classes must be >= 1")
    per_class = np.broadcast_to(np.asarray(samples_per_class, dtype=np.int64), (num_classes,))
    if per_class.sum() < n_clients:
        raise ConfigError("not enough samples to give every client at least one")
    for attempt in range(max_attempts):
        table = np.zeros((n_clients, num_classes), dtype=np.int64)
        for c in range(num_classes):
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props) * per_class[c]).astype(np.int64)[:-1]
            table[:, c] = np.diff(np.concatenate(([0], cuts, [per_class[c]])))
        if table.sum(axis=1).min() > 0:
            if attempt:
                log.info("dirichlet partition: redrew %d degenerate tables", attempt)
            return table
        log.debug("dirichlet partition: client with no samples, redrawing")
    raise ConfigError(f"could not draw a partition without empty clients in {max_attempts} attempts")


@dataclass
class LogisticSpec:
    n_clients: int
    dim: int
    num_classes: int = 10
    alpha: float = 0.1
    samples_per_class: int = 200
    l2_reg: float = 1e-3
    batch_size: int = 8
    label_noise: float = 0.1
    seed: int = 0
    kind: str = "logistic"

    def build(self) -> GlobalObjective:
        return make_logistic_ensemble(self)


def make_logistic_ensemble(spec: LogisticSpec) -> GlobalObjective:
    """Clients hold Dirichlet-skewed mixtures of class clusters labelled by a planted linear model.

    ``f*`` is not known in closed form, so ``delta_f`` stays ``None`` and
    must be supplied wherever the rate formulas need it.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    means = 2.0 * rng.standard_normal((spec.num_classes, d)) / np.sqrt(d)
    w_true = rng.standard_normal(d)
    w_true /= np.linalg.norm(w_true)
    table = dirichlet_partition(spec.num_classes, spec.n_clients, spec.alpha, spec.samples_per_class, rng)
    clients = []
    for counts in table:
        labels_of = np.repeat(np.arange(spec.num_classes), counts)
        feats = means[labels_of] + rng.standard_normal((labels_of.size, d)) / np.sqrt(d)
        score = feats @ w_true + spec.label_noise * rng.standard_normal(labels_of.size)
        labels = np.where(score >= 0, 1.0, -1.0)
        clients.append(LogisticClient(feats, labels, spec.l2_reg, spec.batch_size))
    obj = GlobalObjective(clients, spec=asdict(spec))
    obj.partition = table
    return obj


def problem_from_dict(data: dict) -> QuadraticSpec | LogisticSpec:
    data = dict(data)
    kind = data.get("kind", "quadratic")
    cls = {"quadratic": QuadraticSpec, "logistic": LogisticSpec}.get(kind)
    if cls is None:
        raise ConfigError(f"unknown problem kind {kind!r}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for problem {kind!r}: {exc}") from None
