import numpy as np
import pytest

from fedsum import (
    HyperParams,
    Replay,
    Simulation,
    make_quadratic_ensemble,
    quadratic_objective,
)


def random_replay(rng, n_clients, rounds, p=0.4):
    """Schedule where each client joins each round with probability p (may be empty)."""
    return Replay(tuple(tuple(np.flatnonzero(rng.random(n_clients) < p).tolist()) for _ in range(rounds)))


def brute_force_last_selection(sets, n_clients, t):
    """a[i, t] = max{j <= t : i in S_j}, or -1."""
    out = []
    for i in range(n_clients):
        hits = [j for j in range(t + 1) if i in sets[j]]
        out.append(max(hits) if hits else -1)
    return np.array(out)


def random_fedsum_run(rng, algorithm, k_max=4, n_max=8, t_max=20, sigma=0.5, local_steps=None):
    n = int(rng.integers(2, n_max + 1))
    rounds = int(rng.integers(3, t_max + 1))
    k = int(rng.integers(1, k_max + 1)) if local_steps is None else local_steps
    d = int(rng.integers(1, 5))
    obj = make_quadratic_ensemble(n, d, float(rng.uniform(0.5, 3.0)), sigma, rng)
    pattern = random_replay(rng, n, rounds, p=float(rng.uniform(0.2, 0.9)))
    hp = HyperParams(float(rng.uniform(0.5, 1.5)), float(rng.uniform(0.01, 0.1)), k)
    seed = int(rng.integers(0, 2**31))
    return Simulation(obj, algorithm, hp, pattern, seed, rounds, keep_grad_log=True, keep_y_history=True)


@pytest.fixture
def two_point():
    """Two 1-d clients centered at 0 and 2: x* = 1, f* = 0.5."""
    return quadratic_objective([0.0, 2.0])


@pytest.fixture
def ensemble():
    return make_quadratic_ensemble(20, 5, 3.0, 0.0, np.random.default_rng(0))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
