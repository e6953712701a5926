import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loralab.errors import ContractViolation
from loralab.numerics import (
    cross_entropy,
    eigh,
    ema_update,
    entropy,
    finite_diff_grad,
    frechet_distance,
    kl_divergence,
    log_softmax,
    softmax,
    sym_sqrt,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
logit_vectors = arrays(np.float64, st.integers(1, 12), elements=finite)


def simplex(n_min=2, n_max=8):
    return arrays(np.float64, st.integers(n_min, n_max), elements=st.floats(0.0, 1.0)).filter(
        lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


def random_psd(rng, n, rank=None):
    a = rng.normal(size=(n, rank or n))
    return a @ a.T


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_analytic(self):
        np.testing.assert_allclose(softmax([math.log(2), 0.0, 0.0]), [0.5, 0.25, 0.25], atol=1e-15)

    def test_golden_seed7(self):
        # 50-digit mpmath evaluation of softmax(default_rng(7).normal(size=8))
        expected = [0.10642884703920019, 0.1433074099863562, 0.0808106408247019, 0.04362605950329707,
                    0.06746275854897477, 0.03943287860182757, 0.11288731493396471, 0.4060440905616776]
        got = softmax(np.random.default_rng(7).normal(size=8))
        np.testing.assert_allclose(got, expected, rtol=1e-14)

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            softmax([])

    def test_extreme_logits_stay_finite(self):
        p = softmax([1000.0, -1000.0, 0.0])
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)

    @given(logit_vectors, st.floats(-100, 100))
    def test_simplex_and_shift_invariance(self, z, c):
        p = softmax(z)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
        np.testing.assert_allclose(softmax(z + c), p, atol=1e-12)

    def test_batch_rows_independent(self, rng):
        z = rng.normal(size=(5, 4))
        np.testing.assert_allclose(softmax(z), np.stack([softmax(r) for r in z]), atol=1e-15)

    def test_log_softmax_consistent(self, rng):
        z = rng.normal(size=6)
        np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-15)


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert cross_entropy([1.0] * 4, [1, 0, 0, 0]) == pytest.approx(math.log(4), abs=1e-12)

    def test_golden(self):
        # mpmath: -log(e^2 / (e^2 + 2))
        assert cross_entropy([2.0, 0.0, 0.0], [1, 0, 0]) == pytest.approx(0.2395447662218845, rel=1e-14)

    def test_matches_entropy_at_own_softmax(self, rng):
        z = rng.normal(size=5)
        assert cross_entropy(z, softmax(z)) == pytest.approx(entropy(softmax(z)), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            cross_entropy([0.0, 1.0], [1.0, 0.0, 0.0])

    def test_target_off_simplex(self):
        with pytest.raises(ContractViolation):
            cross_entropy([0.0, 1.0], [0.7, 0.7])

    @given(logit_vectors.filter(lambda z: z.size >= 2), st.data())
    @settings(max_examples=60)
    def test_gibbs_inequality(self, z, data):
        q = data.draw(arrays(np.float64, z.size, elements=st.floats(0.0, 1.0)).filter(lambda a: a.sum() > 1e-3))
        q = q / q.sum()
        assert cross_entropy(z, q) >= entropy(q) - 1e-9

    def test_gradient_by_finite_differences(self, rng):
        q = softmax(rng.normal(size=6))
        z = rng.normal(size=6)
        fd = finite_diff_grad(lambda v: cross_entropy(v, q), z)
        np.testing.assert_allclose(fd, softmax(z) - q, atol=1e-9)


class TestKL:
    def test_identity(self):
        assert kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0

    def test_single_term(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)

    def test_golden(self):
        # mpmath: 0.7 ln(7/3) + 0.3 ln(3/7)
        assert kl_divergence([0.7, 0.3], [0.3, 0.7]) == pytest.approx(0.33891914415488145, rel=1e-14)

    def test_zero_q_is_floored(self):
        assert kl_divergence([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.5 * math.log(0.5 / 1e-12) + 0.5 * math.log(0.5))

    def test_mismatch(self):
        with pytest.raises(ContractViolation):
            kl_divergence([0.5, 0.5], [1.0, 0.0, 0.0])

    @given(st.data())
    def test_nonnegative_and_zero_iff_equal(self, data):
        n = data.draw(st.integers(2, 6))
        p = data.draw(simplex(n, n))
        q = data.draw(simplex(n, n))
        assert kl_divergence(p, q) >= 0
        assert kl_divergence(p, p) <= 1e-12
        if np.abs(p - q).max() > 1e-3:
            assert kl_divergence(p, q) > 0


class TestEma:
    def test_boundaries(self):
        q, p = np.array([1.0, 0.0]), np.array([0.5, 0.5])
        np.testing.assert_array_equal(ema_update(q, p, 1.0), q)
        np.testing.assert_array_equal(ema_update(q, p, 0.0), p)

    def test_arithmetic(self):
        np.testing.assert_allclose(ema_update([1.0, 0.0], [0.5, 0.5], 0.9), [0.95, 0.05], atol=1e-15)

    @pytest.mark.parametrize("mu", [-0.1, 1.1, float("nan")])
    def test_bad_momentum(self, mu):
        with pytest.raises(ContractViolation):
            ema_update([1.0, 0.0], [0.5, 0.5], mu)

    @given(st.data(), st.floats(0.0, 1.0))
    def test_stays_on_simplex(self, data, mu):
        n = data.draw(st.integers(2, 6))
        out = ema_update(data.draw(simplex(n, n)), data.draw(simplex(n, n)), mu)
        assert np.all(out >= -1e-15) and abs(out.sum() - 1) < 1e-9


class TestEighAndSqrt:
    def test_identity(self):
        np.testing.assert_allclose(sym_sqrt(np.eye(3)), np.eye(3), atol=1e-15)

    def test_diagonal(self):
        np.testing.assert_allclose(sym_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)

    def test_random_psd_5x5_seed3(self):
        m = random_psd(np.random.default_rng(3), 5)
        s = sym_sqrt(m)
        assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) < 1e-6

    @pytest.mark.parametrize("n", [1, 2, 8, 16, 32])
    def test_squares_back_up_to_32(self, n):
        rng = np.random.default_rng(n)
        m = random_psd(rng, n)
        s = sym_sqrt(m)
        assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) < 1e-6

    def test_rank_deficient(self):
        m = random_psd(np.random.default_rng(0), 6, rank=2)
        s = sym_sqrt(m)
        assert np.linalg.norm(s @ s - m) / np.linalg.norm(m) < 1e-6

    def test_eigh_reconstructs_and_orthonormal(self):
        m = random_psd(np.random.default_rng(5), 64) - 3 * np.eye(64)
        w, v = eigh(m)
        assert np.all(np.diff(w) >= 0)
        np.testing.assert_allclose(v @ np.diag(w) @ v.T, m, atol=1e-9 * np.abs(m).max())
        np.testing.assert_allclose(v.T @ v, np.eye(64), atol=1e-12)

    def test_eigh_matches_brute_force_characteristic_roots(self):
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        np.testing.assert_allclose(eigh(m)[0], [1.0, 3.0], atol=1e-15)

    def test_asymmetric_rejected(self):
        with pytest.raises(ContractViolation):
            sym_sqrt([[1.0, 0.5], [0.0, 1.0]])

    def test_non_square_rejected(self):
        with pytest.raises(ContractViolation):
            sym_sqrt(np.ones((2, 3)))

    def test_negative_eigenvalue_rejected(self):
        with pytest.raises(ContractViolation):
            sym_sqrt(np.diag([1.0, -0.5]))

    def test_tiny_negative_clamped(self):
        s = sym_sqrt(np.diag([1.0, -1e-10]))
        np.testing.assert_allclose(s, np.diag([1.0, 0.0]), atol=1e-15)


class TestFrechet:
    def test_identical(self, rng):
        c = random_psd(rng, 4)
        assert frechet_distance(np.ones(4), c, np.ones(4), c) == pytest.approx(0.0, abs=1e-9)

    def test_mean_shift_only(self):
        assert frechet_distance([1.0, 0.0], np.eye(2), [0.0, 0.0], np.eye(2)) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("m1,v1,m2,v2", [(0.0, 1.0, 2.0, 4.0), (1.5, 0.25, -1.0, 9.0), (0.0, 2.0, 0.0, 2.0)])
    def test_one_dimensional_formula(self, m1, v1, m2, v2):
        expected = (m1 - m2) ** 2 + (math.sqrt(v1) - math.sqrt(v2)) ** 2
        assert frechet_distance([m1], [[v1]], [m2], [[v2]]) == pytest.approx(expected, abs=1e-12)

    def test_golden_2d(self):
        # mpmath sqrtm at 50 digits
        d = frechet_distance([0, 1], [[2, 0.5], [0.5, 1]], [1, -1], [[1, -0.3], [-0.3, 0.5]])
        assert d == pytest.approx(5.553301412770546, rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        args = (rng.normal(size=6), random_psd(rng, 6), rng.normal(size=6), random_psd(rng, 6))
        assert abs(frechet_distance(*args) - frechet_distance(*args[2:], *args[:2])) < 1e-8

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            frechet_distance([0, 0], np.eye(2), [0, 0, 0], np.eye(3))


class TestFiniteDiff:
    def test_quadratic(self):
        np.testing.assert_allclose(finite_diff_grad(lambda x: float((x ** 2).sum()), [1.0, 2.0]), [2.0, 4.0],
                                   atol=1e-8)

    def test_constant(self):
        np.testing.assert_array_equal(finite_diff_grad(lambda x: 3.0, np.zeros(3)), np.zeros(3))

    def test_bad_step(self):
        with pytest.raises(ContractViolation):
            finite_diff_grad(lambda x: 0.0, [1.0], h=0.0)

    def test_input_not_mutated(self):
        x = np.array([1.0, 2.0])
        finite_diff_grad(lambda v: float(v.sum()), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])


class TestAgainstMpmath:
    """Live 50-digit reference evaluations at random points."""

    @pytest.fixture(autouse=True)
    def precision(self):
        mpmath = pytest.importorskip("mpmath")
        with mpmath.workdps(50):
            yield mpmath

    @pytest.mark.parametrize("seed", range(5))
    def test_softmax_and_cross_entropy(self, precision, seed):
        mp = precision
        rng = np.random.default_rng(seed)
        z = rng.normal(size=6) * 4
        q = rng.dirichlet(np.ones(6))
        exps = [mp.e ** mp.mpf(v) for v in z]
        total = mp.fsum(exps)
        ref_p = [float(e / total) for e in exps]
        ref_ce = float(-mp.fsum(mp.mpf(qi) * mp.log(e / total) for qi, e in zip(q, exps)))
        np.testing.assert_allclose(softmax(z), ref_p, rtol=1e-14)
        assert cross_entropy(z, q) == pytest.approx(ref_ce, rel=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_kl(self, precision, seed):
        mp = precision
        rng = np.random.default_rng(seed)
        p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        ref = float(mp.fsum(mp.mpf(a) * mp.log(mp.mpf(a) / mp.mpf(b)) for a, b in zip(p, q)))
        assert kl_divergence(p, q) == pytest.approx(ref, rel=1e-12, abs=1e-15)

    @pytest.mark.parametrize("seed", range(3))
    def test_frechet(self, precision, seed):
        mp = precision
        rng = np.random.default_rng(seed)
        m1, m2 = rng.normal(size=3), rng.normal(size=3)
        c1, c2 = random_psd(rng, 3) + np.eye(3), random_psd(rng, 3) + np.eye(3)
        s1 = mp.sqrtm(mp.matrix(c1.tolist()))
        inner = mp.sqrtm(s1 * mp.matrix(c2.tolist()) * s1)
        trace = sum(c1[i, i] + c2[i, i] for i in range(3)) - 2 * sum(inner[i, i] for i in range(3))
        ref = float(mp.re(sum((m1 - m2) ** 2) + trace))
        assert frechet_distance(m1, c1, m2, c2) == pytest.approx(ref, rel=1e-9)
