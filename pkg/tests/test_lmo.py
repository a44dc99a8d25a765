import numpy as np
import pytest

from muon_ef.errors import UnsupportedNormError, ZeroInputError
from muon_ef.lmo import (
    LMO_SUPPORTED,
    NS_COEFFS_MUON,
    NS_COEFFS_POLAR,
    NS_SAFETY_FACTOR,
    dual_subgradient,
    lmo_direction,
    lmo_step,
    max_row_sum_sharp_column_form,
    newton_schulz,
    ns_scalar_map,
    sharp,
)
from muon_ef.tensorcore import (
    ENTRYWISE_L1,
    ENTRYWISE_LINF,
    FROBENIUS,
    NUCLEAR,
    SPECTRAL,
    column_lpq,
    inner,
    norm,
    svd,
)

SHAPES = [(2, 2), (3, 4), (5, 3)]


class TestLmoDirection:
    def test_spectral_diag(self):
        res = lmo_direction(np.diag([2.0, 1.0]), SPECTRAL)
        np.testing.assert_allclose(res.direction, -np.eye(2), atol=1e-12)
        assert res.dual_norm_value == pytest.approx(3.0)

    def test_linf_example(self):
        g = np.array([[3.0, -1.0], [0.0, 2.0]])
        res = lmo_direction(g, ENTRYWISE_LINF)
        np.testing.assert_allclose(res.direction, -np.array([[1.0, -1.0], [0.0, 1.0]]))
        assert res.dual_norm_value == pytest.approx(6.0)

    def test_l1_example(self):
        g = np.array([[3.0, -1.0], [0.0, 2.0]])
        res = lmo_direction(g, ENTRYWISE_L1)
        expected = np.zeros((2, 2))
        expected[0, 0] = -1.0
        np.testing.assert_allclose(res.direction, expected)
        assert res.dual_norm_value == pytest.approx(3.0)

    def test_l1_tie_breaks_to_lowest_index(self):
        g = np.array([[2.0, -2.0], [2.0, 2.0]])
        res = lmo_direction(g, ENTRYWISE_L1)
        assert res.direction[0, 0] == -1.0 and np.count_nonzero(res.direction) == 1

    def test_zero_input(self):
        for kind in LMO_SUPPORTED:
            res = lmo_direction(np.zeros((2, 3)), kind)
            assert res.dual_norm_value == 0.0
            assert not np.any(res.direction)

    def test_unsupported_norm(self):
        with pytest.raises(UnsupportedNormError):
            lmo_direction(np.eye(2), column_lpq(2, 1))

    def test_unit_norm_and_identity(self):
        # ||direction||_kind = 1 and <G, dir> = -||G||_* on random inputs.
        rng = np.random.default_rng(0)
        for kind in LMO_SUPPORTED:
            for shape in SHAPES:
                for _ in range(200):
                    g = rng.standard_normal(shape)
                    res = lmo_direction(g, kind)
                    assert norm(res.direction, kind) == pytest.approx(1.0, abs=1e-10)
                    scale = max(1.0, res.dual_norm_value)
                    assert abs(inner(g, res.direction) + res.dual_norm_value) <= 1e-10 * scale

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(1)
        for kind in LMO_SUPPORTED:
            g = rng.standard_normal((3, 4))
            a = lmo_direction(g, kind)
            b = lmo_direction(7.5 * g, kind)
            np.testing.assert_allclose(a.direction, b.direction, atol=1e-12)
            assert b.dual_norm_value == pytest.approx(7.5 * a.dual_norm_value, rel=1e-12)


class TestSharp:
    def test_nuclear_example(self):
        gs = sharp(np.diag([3.0, 1.0]), NUCLEAR)
        expected = np.zeros((2, 2))
        expected[0, 0] = 3.0
        np.testing.assert_allclose(gs, expected, atol=1e-12)

    def test_frobenius_is_identity(self):
        rng = np.random.default_rng(2)
        g = rng.standard_normal((3, 3))
        np.testing.assert_allclose(sharp(g, FROBENIUS), g, atol=1e-12)

    def test_l1_sign_carried(self):
        # The argmax definition of the sharp operator requires the kept entry to
        # carry sign(G): brute-force over single-support candidates confirms.
        g = np.array([[3.0, -1.0], [0.0, 2.0]])
        gs = sharp(g, ENTRYWISE_L1)
        expected = np.zeros((2, 2))
        expected[0, 0] = 3.0
        np.testing.assert_allclose(gs, expected)
        best = -np.inf
        for i in range(2):
            for j in range(2):
                for scale in np.linspace(-4, 4, 401):
                    cand = np.zeros((2, 2))
                    cand[i, j] = scale
                    best = max(best, inner(g, cand) - 0.5 * norm(cand, ENTRYWISE_L1) ** 2)
        assert inner(g, gs) - 0.5 * norm(gs, ENTRYWISE_L1) ** 2 == pytest.approx(best, abs=1e-9)

    def test_identities(self):
        # (inpsharp) <G, G#> = ||G#||^2 and (normsharp) ||G||_* = ||G#||.
        rng = np.random.default_rng(3)
        from muon_ef.tensorcore import dual_of

        for kind in LMO_SUPPORTED:
            for shape in SHAPES:
                for _ in range(200):
                    g = rng.standard_normal(shape)
                    gs = sharp(g, kind)
                    scale = max(1.0, norm(g, dual_of(kind)) ** 2)
                    assert abs(inner(g, gs) - norm(gs, kind) ** 2) <= 1e-10 * scale
                    assert norm(g, dual_of(kind)) == pytest.approx(norm(gs, kind), rel=1e-10)


class TestDualSubgradient:
    def test_spectral(self):
        np.testing.assert_allclose(dual_subgradient(np.diag([2.0, 1.0]), SPECTRAL), np.eye(2), atol=1e-12)

    def test_frobenius(self):
        rng = np.random.default_rng(4)
        g = rng.standard_normal((2, 4))
        np.testing.assert_allclose(dual_subgradient(g, FROBENIUS), g / np.linalg.norm(g))

    def test_linf_row(self):
        h = dual_subgradient(np.array([[0.0, 4.0]]), ENTRYWISE_LINF)
        np.testing.assert_allclose(h, [[0.0, 1.0]])
        g = np.array([[0.0, 4.0]])
        assert inner(h, g) == pytest.approx(norm(g, ENTRYWISE_L1))
        assert norm(h, ENTRYWISE_LINF) == pytest.approx(1.0)

    def test_subdiff_identities(self):
        rng = np.random.default_rng(5)
        from muon_ef.tensorcore import dual_of

        for kind in LMO_SUPPORTED:
            g = rng.standard_normal((4, 3))
            h = dual_subgradient(g, kind)
            assert inner(h, g) == pytest.approx(norm(g, dual_of(kind)), rel=1e-10)
            assert norm(h, kind) == pytest.approx(1.0, abs=1e-10)

    def test_zero_raises(self):
        with pytest.raises(ZeroInputError):
            dual_subgradient(np.zeros((2, 2)), FROBENIUS)


class TestLmoStep:
    def test_spectral_example(self):
        out = lmo_step(np.zeros((2, 2)), np.diag([2.0, 1.0]), 1.0, SPECTRAL)
        np.testing.assert_allclose(out, -np.eye(2), atol=1e-12)

    def test_zero_radius(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 3))
        np.testing.assert_array_equal(lmo_step(x, rng.standard_normal((3, 3)), 0.0, FROBENIUS), x)

    def test_linf_scaling(self):
        g = np.array([[3.0, -1.0], [0.0, 2.0]])
        out = lmo_step(np.zeros((2, 2)), g, 2.0, ENTRYWISE_LINF)
        np.testing.assert_allclose(out, -2.0 * np.array([[1.0, -1.0], [0.0, 1.0]]))

    def test_sharp_form_equivalence(self):
        rng = np.random.default_rng(7)
        for kind in LMO_SUPPORTED:
            for _ in range(100):
                x = rng.standard_normal((3, 4))
                g = rng.standard_normal((3, 4))
                t = float(rng.uniform(0.0, 3.0))
                res = lmo_direction(g, kind)
                direct = lmo_step(x, g, t, kind)
                via_sharp = x - (t / res.dual_norm_value) * sharp(g, kind)
                np.testing.assert_allclose(direct, via_sharp, atol=1e-10)


class TestNewtonSchulz:
    def test_identity_scalar_oracle(self):
        # The matrix iteration agrees exactly with the scalar polynomial model;
        # the aggressive coefficients do NOT settle near 1 in 5 iterations while
        # the convergent quintic lands within 0.01 of the true polar factor I.
        sigma_hat = 1.0 / (NS_SAFETY_FACTOR * np.sqrt(3.0))
        for coeffs in (NS_COEFFS_MUON, NS_COEFFS_POLAR):
            out = newton_schulz(np.eye(3), 5, coeffs)
            expected = ns_scalar_map(sigma_hat, coeffs, 5) * np.eye(3)
            np.testing.assert_allclose(out, expected, atol=1e-10)
        polar_out = newton_schulz(np.eye(3), 5, NS_COEFFS_POLAR)
        np.testing.assert_allclose(polar_out, np.eye(3), atol=0.01)

    def test_rank_one(self):
        rng = np.random.default_rng(8)
        u = rng.standard_normal(6)
        v = rng.standard_normal(4)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        g = np.outer(u, v)
        approx = newton_schulz(g, 5, NS_COEFFS_POLAR)
        assert np.linalg.norm(approx - g) <= 0.05

    def test_random_vs_exact_polar(self):
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(100):
            q1, _ = np.linalg.qr(rng.standard_normal((8, 8)))
            q2, _ = np.linalg.qr(rng.standard_normal((8, 8)))
            s = rng.uniform(0.3, 1.0, 8)
            g = (q1 * s) @ q2.T
            u, _, v = svd(g)
            exact = u @ v.T
            approx = newton_schulz(g, 5, NS_COEFFS_POLAR)
            worst = max(worst, np.linalg.norm(approx - exact) / np.sqrt(8))
        assert worst <= 0.05

    def test_muon_coefficients_documented_band(self):
        # Practical default: singular values land in (0, 1 + 0.2] after 5 steps.
        rng = np.random.default_rng(10)
        for _ in range(50):
            g = rng.standard_normal((6, 6))
            approx = newton_schulz(g, 5, NS_COEFFS_MUON)
            s = np.linalg.svd(approx, compute_uv=False)
            assert np.all(s > 0.0) and np.all(s <= 1.2)

    def test_tall_input_transposed(self):
        rng = np.random.default_rng(11)
        g = rng.standard_normal((7, 3))
        u, _, v = svd(g)
        approx = newton_schulz(g, 5, NS_COEFFS_POLAR)
        assert approx.shape == (7, 3)
        assert np.linalg.norm(approx - u @ v.T) / np.sqrt(3) <= 0.05

    def test_zero_raises(self):
        with pytest.raises(ZeroInputError):
            newton_schulz(np.zeros((2, 2)))


class TestMaxRowSumColumnForm:
    def test_transcribed_formula_shape(self):
        g = np.array([[3.0, -1.0], [0.0, 2.0]])
        out = max_row_sum_sharp_column_form(g)
        # column maxima at rows (0, 1); both entries carry the total 3 + 2 = 5
        expected = np.array([[5.0, 0.0], [0.0, 5.0]])
        np.testing.assert_allclose(out, expected)
