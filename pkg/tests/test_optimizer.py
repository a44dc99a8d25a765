import math
import warnings

import numpy as np
import pytest

from muon_ef.compressors import Damping, Identity, TopK
from muon_ef.errors import MissingConstantError, MissingWorkerError, UnknownObjectiveError
from muon_ef.optimizer import (
    HyperParams,
    aggregate,
    check_compressor_families,
    init_states,
    load_snapshot,
    lyapunov,
    save_snapshot,
    server_round,
    theory_momentum,
    theory_stepsize,
    worker_round,
)
from muon_ef.problems import ModelSpec, make_quadratic_ensemble
from muon_ef.tensorcore import FROBENIUS, SPECTRAL, LayeredTensor, svd

SPEC = ModelSpec(shapes=((3, 2), (2, 2)), norms=(FROBENIUS, FROBENIUS))


def make_obj(n=2, seed=0, sigmas=None, heterogeneity=1.0):
    return make_quadratic_ensemble(SPEC, n, heterogeneity, 6.0, np.random.default_rng(seed), sigmas)


def make_hp(**kw):
    defaults = dict(
        norms=SPEC.norms,
        schedule="stepsize",
        values=(0.05, 0.05),
        betas=(1.0, 1.0),
        server_compressor=Identity(),
        worker_compressor=Identity(),
        variant="deterministic",
    )
    defaults.update(kw)
    return HyperParams(**defaults)


def rngs(n, seed=0):
    return [np.random.default_rng((seed, j)) for j in range(n)]


class TestServerRound:
    def test_identity_compressor_syncs_w(self):
        obj = make_obj()
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        server, _ = init_states(obj, x0, make_hp(), "gradient", rngs(2))
        server, msgs = server_round(server, make_hp(), np.random.default_rng(0))
        assert server.x.max_abs_diff(server.w) == 0.0
        assert len(msgs) == 2

    def test_zero_radius_keeps_x(self):
        obj = make_obj()
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        hp = make_hp(schedule="radius", values=(0.0, 0.0))
        server, _ = init_states(obj, x0, hp, "gradient", rngs(2))
        server2, msgs = server_round(server, hp, np.random.default_rng(0))
        assert server2.x.max_abs_diff(server.x) == 0.0
        # S compresses the zero matrix
        for m in msgs:
            assert not np.any(np.abs(m.values) > 0) if m.values is not None else True

    def test_spectral_composition_example(self):
        spec = ModelSpec(shapes=((2, 2),), norms=(SPECTRAL,))
        obj = make_quadratic_ensemble(spec, 1, 0.0, 2.0, np.random.default_rng(1))
        hp = HyperParams(
            norms=spec.norms, schedule="radius", values=(1.0,), betas=(1.0,),
            server_compressor=Identity(), worker_compressor=Identity(),
        )
        # server with G = diag(2,1) at X = 0 must step to -I and broadcast it
        from muon_ef.optimizer import ServerState

        x0 = LayeredTensor.zeros(spec.shapes)
        server = ServerState(x=x0, w=x0.copy(), g=LayeredTensor([np.diag([2.0, 1.0])]))
        server, _ = server_round(server, hp, np.random.default_rng(0))
        np.testing.assert_allclose(server.x[0], -np.eye(2), atol=1e-12)
        np.testing.assert_allclose(server.w[0], -np.eye(2), atol=1e-12)
        assert server.last_gammas[0] == pytest.approx(1.0 / 3.0)

    def test_zero_gradient_layer_skips(self):
        from muon_ef.optimizer import ServerState

        hp = make_hp(schedule="radius", values=(0.5, 0.5))
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        g = LayeredTensor([np.zeros(SPEC.shapes[0]), np.ones(SPEC.shapes[1])])
        server = ServerState(x=x0, w=x0.copy(), g=g)
        server2, _ = server_round(server, hp, np.random.default_rng(0))
        # zero-gradient layer untouched, the other takes its radius step
        assert np.array_equal(server2.x[0], x0[0])
        assert np.max(np.abs(server2.x[1] - x0[1])) > 0.0
        assert server2.last_gammas[0] == 0.0


class TestWorkerRound:
    def test_beta_one_momentum_free(self):
        obj = make_obj(sigmas=(0.0, 0.0))
        hp = make_hp(variant="stochastic")
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        server, workers = init_states(obj, x0, hp, "stochastic", rngs(2))
        server, msgs = server_round(server, hp, np.random.default_rng(1))
        w1, _ = worker_round(workers[0], msgs, obj, hp, np.random.default_rng(2))
        want = obj.worker_gradient(0, w1.w)
        assert w1.m.max_abs_diff(want) <= 1e-14

    def test_identity_deterministic_tracks_gradient(self):
        obj = make_obj()
        hp = make_hp()
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        server, workers = init_states(obj, x0, hp, "gradient", rngs(2))
        server, msgs = server_round(server, hp, np.random.default_rng(3))
        w1, _ = worker_round(workers[0], msgs, obj, hp, np.random.default_rng(4))
        assert w1.g.max_abs_diff(obj.worker_gradient(0, w1.w)) <= 1e-14

    def test_stochastic_reduces_to_deterministic(self):
        # sigma = 0, beta = 1, identity compressors: same iterates round for round
        obj = make_obj(sigmas=(0.0, 0.0))
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        runs = {}
        for variant in ("deterministic", "stochastic"):
            hp = make_hp(variant=variant)
            server, workers = init_states(
                obj, x0, hp, "gradient" if variant == "deterministic" else "stochastic", rngs(2)
            )
            for k in range(5):
                server, msgs = server_round(server, hp, np.random.default_rng((10, k)))
                ups = []
                for j in range(2):
                    workers[j], up = worker_round(
                        workers[j], msgs, obj, hp, np.random.default_rng((11, j, k))
                    )
                    ups.append(up)
                server = aggregate(server, ups, 2)
            runs[variant] = server.x
        assert runs["deterministic"].max_abs_diff(runs["stochastic"]) == 0.0


class TestAggregate:
    def test_zero_uplinks_keep_g(self):
        obj = make_obj()
        hp = make_hp(schedule="radius", values=(0.0, 0.0))
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        server, workers = init_states(obj, x0, hp, "gradient", rngs(2))
        g_before = server.g
        server, msgs = server_round(server, hp, np.random.default_rng(0))
        ups = []
        for j in range(2):
            workers[j], up = worker_round(workers[j], msgs, obj, hp, np.random.default_rng(j))
            ups.append(up)
        # with a zero step and identity compressors the deltas vanish
        server = aggregate(server, ups, 2)
        assert server.g.max_abs_diff(g_before) <= 1e-14

    def test_cancellation(self):
        from muon_ef.compressors import CompressedMessage

        obj = make_obj()
        hp = make_hp()
        x0 = LayeredTensor.zeros(SPEC.shapes)
        server, _ = init_states(obj, x0, hp, "gradient", rngs(2))
        a = np.random.default_rng(0).standard_normal(SPEC.shapes[0])

        def dense(values, shape):
            return CompressedMessage(payload="dense", shape=shape, values=values.ravel().copy())

        up1 = [dense(a, SPEC.shapes[0]), dense(np.zeros(SPEC.shapes[1]), SPEC.shapes[1])]
        up2 = [dense(-a, SPEC.shapes[0]), dense(np.zeros(SPEC.shapes[1]), SPEC.shapes[1])]
        out = aggregate(server, [up1, up2], 2)
        assert out.g.max_abs_diff(server.g) <= 1e-15

    def test_missing_worker(self):
        obj = make_obj()
        server, _ = init_states(obj, LayeredTensor.zeros(SPEC.shapes), make_hp(), "gradient", rngs(2))
        with pytest.raises(MissingWorkerError):
            aggregate(server, [], 2)

    def test_server_g_tracks_worker_mean(self):
        obj = make_obj(n=3)
        hp = make_hp(worker_compressor=TopK(0.5), server_compressor=Damping(0.9))
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        server, workers = init_states(obj, x0, hp, "gradient", rngs(3))
        for k in range(10):
            server, msgs = server_round(server, hp, np.random.default_rng((20, k)))
            ups = []
            for j in range(3):
                workers[j], up = worker_round(
                    workers[j], msgs, obj, hp, np.random.default_rng((21, j, k))
                )
                ups.append(up)
            server = aggregate(server, ups, 3)
            mean_g = (workers[0].g + workers[1].g + workers[2].g) * (1.0 / 3.0)
            assert server.g.max_abs_diff(mean_g) <= 1e-12
            for w in workers:
                assert w.w.max_abs_diff(server.w) == 0.0  # bit-exact replica


class TestMuonRecovery:
    def test_single_node_identity_matches_reference_muon(self):
        # n=1, identity compressors, beta=1, sigma=0, spectral norm, exact SVD:
        # the iterates must match X <- X - t * U V^T on the raw gradient.
        spec = ModelSpec(shapes=((4, 3),), norms=(SPECTRAL,))
        obj = make_quadratic_ensemble(spec, 1, 0.0, 5.0, np.random.default_rng(42))
        hp = HyperParams(
            norms=spec.norms, schedule="radius", values=(0.05,), betas=(1.0,),
            server_compressor=Identity(), worker_compressor=Identity(),
        )
        x0 = LayeredTensor([np.ones(spec.shapes[0])])
        server, workers = init_states(obj, x0, hp, "gradient", rngs(1))
        x_ref = x0[0].copy()
        for k in range(50):
            server, msgs = server_round(server, hp, np.random.default_rng((30, k)))
            workers[0], up = worker_round(workers[0], msgs, obj, hp, np.random.default_rng((31, k)))
            server = aggregate(server, [up], 1)
            # straight-line reference Muon step
            g_ref = obj.gradient(LayeredTensor([x_ref]))[0]
            u, s, v = svd(g_ref)
            rank = int(np.sum(s > s[0] * 4 * np.finfo(float).eps)) if s[0] > 0 else 0
            x_ref = x_ref - 0.05 * (u[:, :rank] @ v[:, :rank].T)
            assert np.max(np.abs(server.x[0] - x_ref)) <= 1e-10


class TestSchedules:
    def test_radius_stepsize_equivalence(self):
        obj = make_obj(n=3)
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        hp_r = make_hp(schedule="radius", values=(0.2, 0.3),
                       worker_compressor=TopK(0.5), server_compressor=Damping(0.8))
        server, workers = init_states(obj, x0, hp_r, "gradient", rngs(3))
        gammas = []
        for k in range(40):
            server, msgs = server_round(server, hp_r, np.random.default_rng((40, k)))
            gammas.append(server.last_gammas)
            ups = []
            for j in range(3):
                workers[j], up = worker_round(workers[j], msgs, obj, hp_r, np.random.default_rng((41, j, k)))
                ups.append(up)
            server = aggregate(server, ups, 3)
        x_radius = server.x

        server, workers = init_states(obj, x0, hp_r, "gradient", rngs(3))
        for k in range(40):
            hp_s = make_hp(schedule="stepsize", values=gammas[k],
                           worker_compressor=TopK(0.5), server_compressor=Damping(0.8))
            server, msgs = server_round(server, hp_s, np.random.default_rng((40, k)))
            ups = []
            for j in range(3):
                workers[j], up = worker_round(workers[j], msgs, obj, hp_s, np.random.default_rng((41, j, k)))
                ups.append(up)
            server = aggregate(server, ups, 3)
        assert server.x.max_abs_diff(x_radius) == 0.0  # same float path, bit-equal


class TestTheory:
    def test_t1_paper_arithmetic(self):
        from muon_ef.problems import SmoothnessProfile

        profile = SmoothnessProfile(
            l0=np.array([1.0]), l1=np.zeros(1),
            worker_l0=np.ones((1, 2)), worker_l1=np.zeros((1, 2)),
        )
        params = theory_stepsize("T1", profile, 1.0, 1.0, None, 2, 100,
                                 (FROBENIUS,), ((2, 2),))
        expected = 1.0 / (2.0 + 4.0 * math.sqrt(78.0))
        assert params.values[0] == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.02679, abs=5e-6)

    def test_t1_monotone_in_alpha_p(self):
        from muon_ef.problems import SmoothnessProfile

        profile = SmoothnessProfile(
            l0=np.array([1.0]), l1=np.zeros(1),
            worker_l0=np.ones((1, 2)), worker_l1=np.zeros((1, 2)),
        )
        full = theory_stepsize("T1", profile, 1.0, 1.0, None, 2, 100, (FROBENIUS,), ((2, 2),))
        half = theory_stepsize("T1", profile, 0.5, 1.0, None, 2, 100, (FROBENIUS,), ((2, 2),))
        assert half.values[0] < full.values[0]

    def test_t2_radius(self):
        from muon_ef.problems import SmoothnessProfile

        profile = SmoothnessProfile(
            l0=np.array([2.0]), l1=np.array([0.5]),
            worker_l0=np.ones((1, 2)), worker_l1=np.ones((1, 2)),
        )
        params = theory_stepsize("T2", profile, 1.0, 0.5, None, 2, 99, (FROBENIUS,), ((2, 2),), eta=2.0)
        assert params.schedule == "radius"
        assert params.values[0] == pytest.approx(2.0 / 10.0)

    def test_t3_formula(self):
        from muon_ef.problems import SmoothnessProfile

        profile = SmoothnessProfile(
            l0=np.array([1.0]), l1=np.zeros(1),
            worker_l0=np.ones((1, 2)), worker_l1=np.zeros((1, 2)),
        )
        beta, ap, ad = 0.5, 0.8, 0.5
        params = theory_stepsize("T3", profile, ap, ad, beta, 2, 100, (FROBENIUS,), ((2, 2),))
        zeta = (
            12.0 / beta**2
            + 24.0 * (beta + 2.0) / ap**2
            + 36.0 * (beta**2 + 4.0) / ad**2
            + 144.0 * beta**2 * (2.0 * beta + 5.0) / (ap**2 * ad**2)
        )
        assert params.values[0] == pytest.approx(1.0 / (2.0 + 2.0 * math.sqrt(zeta)))
        assert params.schedule == "stepsize"
        # per-layer momentum feeds the per-layer zeta
        two = theory_stepsize("T3", SmoothnessProfile(
            l0=np.array([1.0, 1.0]), l1=np.zeros(2),
            worker_l0=np.ones((2, 2)), worker_l1=np.zeros((2, 2)),
        ), ap, ad, (0.5, 1.0), 2, 100, (FROBENIUS, FROBENIUS), ((2, 2), (2, 2)))
        assert two.values[0] != two.values[1]

    def test_t4_alpha_one_drops_residual_caps(self):
        from muon_ef.problems import SmoothnessProfile

        profile = SmoothnessProfile(
            l0=np.array([1.0]), l1=np.array([0.2]),
            worker_l0=np.ones((1, 2)), worker_l1=0.2 * np.ones((1, 2)),
        )
        kp1 = 100
        params = theory_stepsize("T4", profile, 1.0, 1.0, None, 2, kp1 - 1, (FROBENIUS,), ((2, 2),), eta=10.0)
        caps = [1.0, math.sqrt(kp1) / (6 * 0.04), 1.0 / (24 * 0.04)]
        expected_eta = min(10.0, math.sqrt(min(caps)))
        assert params.values[0] == pytest.approx(expected_eta / kp1**0.75)
        assert params.betas[0] == pytest.approx(1.0 / math.sqrt(kp1))

    def test_t4_quadratic_l1_zero(self):
        from muon_ef.problems import SmoothnessProfile

        profile = SmoothnessProfile(
            l0=np.array([1.0]), l1=np.zeros(1),
            worker_l0=np.ones((1, 2)), worker_l1=np.zeros((1, 2)),
        )
        params = theory_stepsize("T4", profile, 1.0, 0.5, None, 2, 255, (FROBENIUS,), ((2, 2),), eta=3.0)
        assert params.values[0] == pytest.approx(1.0 / 256**0.75)  # eta capped at 1

    def test_missing_constants(self):
        with pytest.raises(MissingConstantError):
            theory_stepsize("T1", None, 1.0, 1.0, None, 2, 10, (FROBENIUS,), ((2, 2),))
        from muon_ef.problems import SmoothnessProfile

        profile = SmoothnessProfile(
            l0=np.array([1.0]), l1=np.zeros(1),
            worker_l0=np.ones((1, 2)), worker_l1=np.zeros((1, 2)),
        )
        with pytest.raises(MissingConstantError):
            theory_stepsize("T3", profile, 1.0, 1.0, None, 2, 10, (FROBENIUS,), ((2, 2),))
        with pytest.raises(MissingConstantError):
            theory_stepsize("T1", profile, 0.0, 1.0, None, 2, 10, (FROBENIUS,), ((2, 2),))

    def test_momentum_corollary(self):
        from muon_ef.problems import SmoothnessProfile

        profile = SmoothnessProfile(
            l0=np.array([2.0, 2.0]), l1=np.zeros(2),
            worker_l0=np.ones((2, 2)), worker_l1=np.zeros((2, 2)),
        )
        betas = theory_momentum(profile, 0.5, 4, 1000, (0.5, 0.0), 3.0,
                                (FROBENIUS, FROBENIUS), ((2, 2), (2, 2)))
        assert betas[1] == 1.0  # noise-free layer
        base = 3.0 * 2.0 / (1.0 * 0.25 * 1000)
        expected = min(1.0, (base * 4) ** 0.5, (base * 0.5) ** (1 / 3), (base * 0.25) ** 0.25)
        assert betas[0] == pytest.approx(expected)


class TestLyapunov:
    def test_zero_at_minimizer_with_exact_states(self):
        obj = make_obj(n=2, heterogeneity=0.0)
        hp = make_hp()
        server, workers = init_states(obj, obj.minimizer, hp, "gradient", rngs(2))
        psi = lyapunov("T1", obj, server, workers, hp, obj.analytic_profile(), 1.0, 1.0)
        assert psi == pytest.approx(0.0, abs=1e-9)

    def test_decreases_after_one_identity_round(self):
        obj = make_obj(n=2)
        profile = obj.analytic_profile()
        params = theory_stepsize("T1", profile, 1.0, 1.0, None, 2, 10, SPEC.norms, SPEC.shapes)
        hp = make_hp(values=params.values)
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        server, workers = init_states(obj, x0, hp, "gradient", rngs(2))
        psi0 = lyapunov("T1", obj, server, workers, hp, profile, 1.0, 1.0)
        server, msgs = server_round(server, hp, np.random.default_rng(0))
        ups = []
        for j in range(2):
            workers[j], up = worker_round(workers[j], msgs, obj, hp, np.random.default_rng(j))
            ups.append(up)
        server = aggregate(server, ups, 2)
        psi1 = lyapunov("T1", obj, server, workers, hp, profile, 1.0, 1.0)
        assert psi1 <= psi0

    def test_mismatch_terms_increase_psi(self):
        obj = make_obj(n=2)
        hp = make_hp()
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        server, workers = init_states(obj, x0, hp, "gradient", rngs(2))
        base = lyapunov("T1", obj, server, workers, hp, obj.analytic_profile(), 1.0, 0.5)
        for w in workers:
            w.g = w.g + LayeredTensor([np.ones(s) for s in SPEC.shapes])
        bumped = lyapunov("T1", obj, server, workers, hp, obj.analytic_profile(), 1.0, 0.5)
        assert bumped > base

    def test_t2_form(self):
        obj = make_obj(n=2)
        hp = make_hp(schedule="radius", values=(0.1, 0.1))
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        server, workers = init_states(obj, x0, hp, "gradient", rngs(2))
        psi = lyapunov("T2", obj, server, workers, hp, obj.analytic_profile(), 1.0, 0.5)
        assert psi == pytest.approx(obj.value(x0) - obj.f_star, abs=1e-10)

    def test_unknown_fstar(self):
        from muon_ef.problems import make_tiny_mlp

        spec = ModelSpec(shapes=((3, 2), (2, 3)), norms=(FROBENIUS, FROBENIUS))
        obj = make_tiny_mlp(spec, 8, 0.1, np.random.default_rng(0), n_workers=2)
        hp = make_hp(norms=spec.norms)
        server, workers = init_states(obj, LayeredTensor.zeros(spec.shapes), hp, "gradient", rngs(2))
        with pytest.raises(UnknownObjectiveError):
            lyapunov("T1", obj, server, workers, hp, None, 1.0, 1.0)


class TestSnapshots:
    def test_round_trip(self):
        obj = make_obj(n=2, sigmas=(0.1, 0.1))
        hp = make_hp(variant="stochastic", worker_compressor=TopK(0.5))
        x0 = LayeredTensor([np.ones(s) for s in SPEC.shapes])
        server, workers = init_states(obj, x0, hp, "stochastic", rngs(2))
        for k in range(5):
            server, msgs = server_round(server, hp, np.random.default_rng((50, k)))
            ups = []
            for j in range(2):
                workers[j], up = worker_round(workers[j], msgs, obj, hp, np.random.default_rng((51, j, k)))
                ups.append(up)
            server = aggregate(server, ups, 2)
        raw = save_snapshot(server, workers)
        server2, workers2 = load_snapshot(raw)
        assert server2.k == server.k
        assert server2.x.max_abs_diff(server.x) == 0.0
        assert server2.g.max_abs_diff(server.g) == 0.0
        for a, b in zip(workers, workers2):
            assert a.g.max_abs_diff(b.g) == 0.0
            assert a.m.max_abs_diff(b.m) == 0.0
        assert save_snapshot(server2, workers2) == raw


class TestFamilyCheck:
    def test_warns_on_mismatch(self):
        spec = ModelSpec(shapes=((3, 3),), norms=(SPECTRAL,))
        hp = HyperParams(
            norms=spec.norms, schedule="stepsize", values=(0.1,), betas=(1.0,),
            server_compressor=Identity(), worker_compressor=TopK(0.5),
        )
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            notes = check_compressor_families("T1", hp)
        assert notes and caught

    def test_silent_on_match(self):
        hp = make_hp(worker_compressor=TopK(0.5))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            notes = check_compressor_families("T1", hp)
        assert not notes and not caught


class TestLmoBackends:
    def test_newton_schulz_backend_close_to_exact(self):
        spec = ModelSpec(shapes=((4, 4),), norms=(SPECTRAL,))
        obj = make_quadratic_ensemble(spec, 1, 0.0, 3.0, np.random.default_rng(60))
        from muon_ef.lmo import NS_COEFFS_POLAR

        hp_exact = HyperParams(
            norms=spec.norms, schedule="radius", values=(0.1,), betas=(1.0,),
            server_compressor=Identity(), worker_compressor=Identity(),
        )
        hp_ns = HyperParams(
            norms=spec.norms, schedule="radius", values=(0.1,), betas=(1.0,),
            server_compressor=Identity(), worker_compressor=Identity(),
            spectral_backend="newton_schulz", ns_coefficients=NS_COEFFS_POLAR,
        )
        x0 = LayeredTensor([np.ones((4, 4))])
        out = {}
        for name, hp in (("exact", hp_exact), ("ns", hp_ns)):
            server, workers = init_states(obj, x0, hp, "gradient", rngs(1))
            for k in range(5):
                server, msgs = server_round(server, hp, np.random.default_rng((70, k)))
                workers[0], up = worker_round(workers[0], msgs, obj, hp, np.random.default_rng((71, k)))
                server = aggregate(server, [up], 1)
            out[name] = server.x
        assert out["exact"].max_abs_diff(out["ns"]) <= 0.05
