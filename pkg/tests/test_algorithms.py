import numpy as np
import pytest

from fedsum import (
    ActiveSet,
    DeterministicCyclic,
    DivergenceError,
    HyperParams,
    IndependentProb,
    Replay,
    ServerState,
    Simulation,
    Streams,
    UniformSample,
    make_quadratic_ensemble,
    quadratic_objective,
    reconstruct_y_direct,
    run_round_fedavg,
    run_round_fedsum,
    run_round_fedsum_b,
    run_round_fedsum_cr,
    run_round_scaffold,
)
from fedsum.algorithms import FEDSUM_FAMILY, cr_correction, initial_clients

from conftest import random_fedsum_run


def fresh(objective):
    return ServerState.initial(objective.x0), initial_clients(objective.n_clients, objective.x0)


def trajectory(sim):
    xs = [sim.server.x.copy()]
    while not sim.done:
        sim.step()
        xs.append(sim.server.x.copy())
    return np.array(xs)


class TestHandRecursions:
    def test_single_client_gradient_descent(self):
        obj = quadratic_objective([0.0], x0=[1.0])
        server, clients = fresh(obj)
        hp = HyperParams(1.0, 0.1, 1)
        xs = []
        for t in range(2):
            run_round_fedsum_b(server, clients, ActiveSet(t, (0,)), obj, hp, Streams(0))
            xs.append(server.x[0])
        assert xs == pytest.approx([0.9, 0.81], abs=1e-15)

    def test_two_clients_full_participation(self, two_point):
        server, clients = fresh(two_point)
        hp = HyperParams(1.0, 0.1, 1)
        xs = []
        for t in range(2):
            run_round_fedsum_b(server, clients, ActiveSet(t, (0, 1)), two_point, hp, Streams(0))
            xs.append(server.x[0])
        assert xs == pytest.approx([0.1, 0.19], abs=1e-15)

    @pytest.mark.parametrize("engine", [run_round_fedsum_b, run_round_fedsum, run_round_fedsum_cr])
    def test_empty_round_replays_previous_direction(self, two_point, engine):
        server, clients = fresh(two_point)
        hp = HyperParams(1.0, 0.1, 2)
        engine(server, clients, ActiveSet(0, (1,)), two_point, hp, Streams(0))
        x1, y0 = server.x.copy(), server.y.copy()
        h_before = [c.h.copy() for c in clients]
        report = engine(server, clients, ActiveSet(1, ()), two_point, hp, Streams(0))
        np.testing.assert_array_equal(server.y, y0)
        np.testing.assert_array_equal(server.x, x1 - (1.0 * 0.1 * 2 / 2) * y0)
        for c, h in zip(clients, h_before):
            np.testing.assert_array_equal(c.h, h)
        assert report.active == 0 and report.downlink == 0 and report.uplink == 0

    def test_round_mismatch(self, two_point):
        server, clients = fresh(two_point)
        with pytest.raises(ValueError):
            run_round_fedsum(server, clients, ActiveSet(3, (0,)), two_point, HyperParams(1, 0.1, 1), Streams(0))


class TestCorrections:
    def test_first_participation_gets_broadcast_direction(self, two_point):
        server, clients = fresh(two_point)
        hp = HyperParams(1.0, 0.1, 3)
        run_round_fedsum(server, clients, ActiveSet(0, (0,)), two_point, hp, Streams(0))
        assert np.all(clients[1].h == 0)
        # client 1 has no history, so its correction is y^{(0)} itself
        np.testing.assert_array_equal(server.y - clients[1].h, server.y)

    def test_cr_correction_zero_at_start(self, two_point):
        server, clients = fresh(two_point)
        y_i = cr_correction(clients[0], server.x, 0, HyperParams(1.0, 0.1, 2), 2)
        np.testing.assert_array_equal(y_i, 0.0)

    def test_homogeneous_controls_agree(self):
        obj = make_quadratic_ensemble(4, 3, 0.0, 0.0, np.random.default_rng(0))
        sim = Simulation(obj, "fedsum", HyperParams(1.0, 0.2, 3), IndependentProb(1.0), 0, 4)
        sim.run()
        for c in sim.clients[1:]:
            np.testing.assert_allclose(c.h, sim.clients[0].h, atol=1e-12, rtol=0)


class TestFamilyIdentities:
    @pytest.mark.parametrize("algorithm", FEDSUM_FAMILY)
    def test_incremental_y_matches_direct(self, algorithm):
        rng = np.random.default_rng(100)
        for _ in range(10):
            sim = random_fedsum_run(rng, algorithm)
            while not sim.done:
                sim.step()
                if sim.tracker.last_selected.max() < 0:
                    continue
                direct = reconstruct_y_direct(sim.grad_log, sim.tracker)
                assert np.linalg.norm(sim.server.y - direct) <= 1e-12 * np.linalg.norm(direct)

    def test_k1_coincidence(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            state = rng.bit_generator.state
            trajs = []
            for algorithm in FEDSUM_FAMILY:
                rng.bit_generator.state = state
                trajs.append(trajectory(random_fedsum_run(rng, algorithm, local_steps=1)))
            for other in trajs[1:]:
                np.testing.assert_array_equal(other, trajs[0])

    @pytest.mark.parametrize("algorithm", FEDSUM_FAMILY)
    def test_shared_server_update(self, algorithm):
        sim = random_fedsum_run(np.random.default_rng(3), algorithm)
        xs = trajectory(sim)
        coef = sim.hp.eta_g * sim.hp.eta_l * sim.hp.local_steps / sim.objective.n_clients
        for t, y in enumerate(sim.y_history):
            np.testing.assert_allclose(xs[t + 1] - xs[t], -coef * y, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize("algorithm", FEDSUM_FAMILY)
    def test_h_is_fresh_gradient_average(self, algorithm):
        sim = random_fedsum_run(np.random.default_rng(4), algorithm)
        while not sim.done:
            t = sim.t
            sim.step()
            for i in range(sim.objective.n_clients):
                if sim.tracker.last_selected[i] == t:
                    np.testing.assert_array_equal(sim.clients[i].h, np.mean(sim.grad_log[i][t], axis=0))

    @pytest.mark.parametrize("algorithm", ["fedsum", "fedsum_cr"])
    def test_displacement_form_matches_average(self, algorithm):
        """N (x - x_K) / (eta_l K) - y_i equals the average local gradient."""
        obj = make_quadratic_ensemble(5, 3, 2.0, 0.3, np.random.default_rng(1))
        hp = HyperParams(1.0, 0.05, 4)
        sim = Simulation(obj, algorithm, hp, UniformSample(2), 2, 10, keep_grad_log=True)
        n = obj.n_clients
        while not sim.done:
            t, x = sim.t, sim.server.x.copy()
            active = sim.tracker.rounds
            corrections = {}
            for i in range(n):
                if algorithm == "fedsum":
                    corrections[i] = sim.server.y - sim.clients[i].h
                else:
                    corrections[i] = cr_correction(sim.clients[i], x, t, hp, n)
            sim.step()
            for i in range(n):
                if sim.tracker.last_selected[i] != t:
                    continue
                local = x.copy()
                for g in sim.grad_log[i][t]:
                    local = local - hp.eta_l / n * (g + corrections[i])
                disp = n * (x - local) / (hp.eta_l * hp.local_steps) - corrections[i]
                np.testing.assert_allclose(disp, sim.clients[i].h, rtol=1e-9, atol=1e-11)

    def test_fedsum_b_batches_are_averaged_at_one_point(self):
        obj = make_quadratic_ensemble(3, 2, 1.0, 0.5, np.random.default_rng(2))
        server, clients = fresh(obj)
        log = {}
        run_round_fedsum_b(server, clients, ActiveSet(0, (0, 1, 2)), obj, HyperParams(1, 0.1, 6), Streams(9), grad_log=log)
        for i in range(3):
            rng = Streams(9).grad(0, i)
            expected = np.mean([obj.clients[i].stoch_grad(obj.x0, rng) for _ in range(6)], axis=0)
            np.testing.assert_allclose(clients[i].h, expected, rtol=1e-14)

    def test_cr_identity(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            sim = random_fedsum_run(rng, "fedsum_cr")
            n = sim.objective.n_clients
            while not sim.done:
                t = sim.t
                for c in sim.clients:
                    built = cr_correction(c, sim.server.x, t, sim.hp, n)
                    ys = [np.zeros_like(sim.server.x) if p < 0 else sim.y_history[p] for p in range(c.a, t)]
                    mean_y = np.sum(ys, axis=0) / (t - c.a)
                    direct = mean_y - c.h
                    # relative to the magnitude of the terms, since their difference can be exactly zero
                    scale = max(np.linalg.norm(mean_y) + np.linalg.norm(c.h), 1e-300)
                    assert np.linalg.norm(built - direct) <= 1e-10 * scale
                sim.step()

    @pytest.mark.parametrize("algorithm", FEDSUM_FAMILY)
    def test_exact_stationarity(self, algorithm, ensemble):
        sim = Simulation(ensemble, algorithm, HyperParams(1.0, 0.02, 5), UniformSample(5), 1, 1500)
        sim.run()
        s = sim.summary()
        assert s["final_grad_norm_sq"] < 1e-10
        assert s["dist_to_opt"] < 1e-5


class TestFedAvg:
    def test_single_client_k1_is_sgd(self):
        obj = make_quadratic_ensemble(1, 3, 0.0, 0.4, np.random.default_rng(0))
        server, clients = fresh(obj)
        hp = HyperParams(0.5, 0.2, 1)
        x = server.x.copy()
        for t in range(5):
            run_round_fedavg(server, clients, ActiveSet(t, (0,)), obj, hp, Streams(3))
            x = x - 0.5 * 0.2 * obj.clients[0].stoch_grad(x, Streams(3).grad(t, 0))
            np.testing.assert_allclose(server.x, x, rtol=1e-14, atol=1e-15)

    def test_homogeneous_matches_centralized(self):
        obj = make_quadratic_ensemble(4, 2, 0.0, 0.0, np.random.default_rng(1))
        sim = Simulation(obj, "fedavg", HyperParams(1.0, 0.1, 3), UniformSample(2), 0, 10)
        xs = trajectory(sim)
        x = obj.x0.copy()
        for t in range(10):
            for _ in range(3):
                x = x - 0.1 * obj.grad(x)
            np.testing.assert_allclose(xs[t + 1], x, rtol=1e-13, atol=1e-15)

    def test_empty_round_keeps_model(self, two_point):
        server, clients = fresh(two_point)
        run_round_fedavg(server, clients, ActiveSet(0, ()), two_point, HyperParams(1, 0.1, 2), Streams(0))
        np.testing.assert_array_equal(server.x, two_point.x0)

    def test_heterogeneity_bias_exhibit(self, two_point):
        eta, k = 0.1, 5
        alternate = Replay(tuple((t % 2,) for t in range(3000)))
        fedavg = Simulation(two_point, "fedavg", HyperParams(1.0, eta, k), alternate, 0, 3000)
        fedavg.run()
        # brute-force the 2-cycle of the FedAvg round map: x -> b + (1-eta)^k (x - b)
        c = (1 - eta) ** k
        step = lambda x, b: b + c * (x - b)
        x = 0.0
        for _ in range(10_000):
            x = step(step(x, 0.0), 2.0)
        cycle = [x, step(x, 0.0)]
        assert abs(fedavg.server.x[0] - cycle[0]) < 1e-12
        assert min((p - 1.0) ** 2 for p in cycle) > 1e-6
        assert min(r.grad_norm_sq for r in fedavg.rows[-100:]) > 1e-6

        fedsum = Simulation(two_point, "fedsum", HyperParams(1.0, eta, k), alternate, 0, 3000)
        fedsum.run()
        assert fedsum.rows[-1].grad_norm_sq < 1e-6


class TestScaffold:
    def test_empty_round_is_noop(self, two_point):
        server, clients = fresh(two_point)
        run_round_scaffold(server, clients, ActiveSet(0, ()), two_point, HyperParams(1, 0.1, 2), Streams(0))
        np.testing.assert_array_equal(server.x, two_point.x0)
        np.testing.assert_array_equal(server.y, 0)

    def test_k1_full_participation_is_gradient_descent(self):
        obj = make_quadratic_ensemble(5, 3, 2.0, 0.0, np.random.default_rng(0))
        sim = Simulation(obj, "scaffold", HyperParams(0.5, 0.2, 1), IndependentProb(1.0), 0, 8)
        xs = trajectory(sim)
        for t in range(8):
            np.testing.assert_allclose(xs[t + 1], xs[t] - 0.5 * 0.2 * obj.grad(xs[t]), rtol=1e-12, atol=1e-14)

    def test_homogeneous_matches_fedavg(self):
        obj = make_quadratic_ensemble(4, 2, 0.0, 0.0, np.random.default_rng(1))
        runs = {}
        for alg in ("scaffold", "fedavg"):
            sim = Simulation(obj, alg, HyperParams(1.0, 0.1, 3), IndependentProb(1.0), 0, 30)
            runs[alg] = trajectory(sim)
        np.testing.assert_allclose(runs["scaffold"], runs["fedavg"], atol=1e-8)

    def test_converges_on_heterogeneous(self, ensemble):
        sim = Simulation(ensemble, "scaffold", HyperParams(1.0, 0.05, 5), DeterministicCyclic(4), 0, 1500)
        sim.run()
        assert sim.summary()["final_grad_norm_sq"] < 1e-10


class TestRuns:
    def test_divergence_guard(self, ensemble):
        sim = Simulation(ensemble, "fedsum_b", HyperParams(50.0, 1.0, 5), UniformSample(20), 0, 200)
        with pytest.raises(DivergenceError):
            sim.run()

    def test_scheduled_rate_reported(self, ensemble):
        sim = Simulation(ensemble, "fedsum", HyperParams(1.0, 0.01, 2, "sqrt_decay"), UniformSample(4), 0, 21)
        sim.run()
        assert sim.rows[0].eta_l == 0.01
        assert sim.rows[20].eta_l == pytest.approx(0.01 / np.sqrt(3))

    @pytest.mark.parametrize("algorithm", ["fedsum_b", "fedsum", "fedsum_cr", "fedavg", "scaffold"])
    def test_checkpoint_resume(self, tmp_path, algorithm):
        obj = make_quadratic_ensemble(6, 3, 2.0, 0.2, np.random.default_rng(5))
        hp = HyperParams(1.0, 0.05, 3)
        full = Simulation(obj, algorithm, hp, UniformSample(2), 4, 30)
        full.run()
        part = Simulation(obj, algorithm, hp, UniformSample(2), 4, 30)
        part.run(until=13)
        part.save_checkpoint(tmp_path / "ck")
        resumed = Simulation.load_checkpoint(tmp_path / "ck", obj, UniformSample(2))
        resumed.run()
        assert resumed.rows == full.rows
        np.testing.assert_array_equal(resumed.server.x, full.server.x)
