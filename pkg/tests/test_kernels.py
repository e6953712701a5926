"""Kernel parity across backends and analytic gradients against finite differences."""

import numpy as np
import pytest

from loralab.kernels import numpy_impl
from loralab.numerics import finite_diff_grad

D, H, K, R = 6, 5, 4, 2


def problem(seed, n=7, n_adapters=1, n_heads=1, soft=True):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, D))
    if soft:
        Q = rng.dirichlet(np.ones(K), size=n)
    else:
        Q = np.eye(K)[rng.integers(0, K, n)]
    W = rng.normal(size=(H, D)) / np.sqrt(D)
    b = rng.normal(size=H) * 0.1
    size = n_adapters * (R * D + H * R) + n_heads * (K * H + K)
    theta = rng.normal(size=size) * 0.5
    return X, Q, W, b, theta


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestSplit:
    def test_views_share_memory(self):
        theta = np.arange(R * D + H * R + K * H + K, dtype=float)
        A, B, Wh, bh = numpy_impl.split(theta, R, D, H, K)
        assert A.shape == (R, D) and B.shape == (H, R) and Wh.shape == (K, H) and bh.shape == (K,)
        A[0, 0] = -1.0
        assert theta[0] == -1.0
        assert bh[-1] == theta[-1]


class TestForward:
    def test_matches_formula(self, backend, rng):
        X, W, b = rng.normal(size=(9, D)), rng.normal(size=(H, D)), rng.normal(size=H)
        Wh, bh = rng.normal(size=(K, H)), rng.normal(size=K)
        expected = np.tanh(X @ W.T + b) @ Wh.T + bh
        np.testing.assert_allclose(backend.forward(X, W, b, Wh, bh), expected, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 255, 256, 600])
    def test_parity_across_batch_sizes(self, n, rng):
        from loralab.kernels import numba_impl
        X, W, b = rng.normal(size=(n, D)), rng.normal(size=(H, D)), rng.normal(size=H)
        Wh, bh = rng.normal(size=(K, H)), rng.normal(size=K)
        np.testing.assert_allclose(numba_impl.forward(X, W, b, Wh, bh), numpy_impl.forward(X, W, b, Wh, bh),
                                   atol=1e-12)


class TestCrossEntropyGrad:
    @pytest.mark.parametrize("seed", range(24))
    def test_finite_differences(self, backend, seed):
        X, Q, W, b, theta = problem(seed, soft=seed % 2 == 0)
        grad = np.zeros_like(theta)
        backend.ce_loss_grad(X, Q, W, b, theta, R, 1.5, grad)
        fd = finite_diff_grad(lambda t: float(backend.ce_loss_grad(X, Q, W, b, t, R, 1.5, np.zeros_like(t))),
                              theta)
        assert rel_err(grad, fd) < 1e-4

    def test_parity(self):
        from loralab.kernels import numba_impl
        X, Q, W, b, theta = problem(99, n=40)
        g1, g2 = np.zeros_like(theta), np.zeros_like(theta)
        l1 = numpy_impl.ce_loss_grad(X, Q, W, b, theta, R, 1.0, g1)
        l2 = numba_impl.ce_loss_grad(X, Q, W, b, theta, R, 1.0, g2)
        assert l1 == pytest.approx(l2, rel=1e-12)
        np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-13)

    def test_loss_is_mean_soft_ce(self, backend):
        X, Q, W, b, theta = problem(3)
        A, B, Wh, bh = numpy_impl.split(theta, R, D, H, K)
        Z = numpy_impl.forward(X, W + 1.0 * B @ A, b, Wh, bh)
        logp = Z - Z.max(1, keepdims=True)
        logp -= np.log(np.exp(logp).sum(1, keepdims=True))
        loss = backend.ce_loss_grad(X, Q, W, b, theta, R, 1.0, np.zeros_like(theta))
        assert loss == pytest.approx(-(Q * logp).sum(1).mean(), rel=1e-12)


class TestDualGrad:
    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("shared_head", [True, False])
    @pytest.mark.parametrize("symmetric", [False, True])
    def test_finite_differences(self, backend, seed, shared_head, symmetric):
        n_heads = 1 if shared_head else 2
        X, Q, W, b, theta = problem(seed, n_adapters=2, n_heads=n_heads)
        lam = [0.0, 0.5, 2.0, 5.0][seed % 4]
        grad = np.zeros_like(theta)
        backend.dual_loss_grad(X, Q, W, b, theta, R, 1.0, lam, symmetric, shared_head, grad)

        def obj(t):
            return float(backend.dual_loss_grad(X, Q, W, b, t, R, 1.0, lam, symmetric, shared_head,
                                                np.zeros_like(t))[0])

        assert rel_err(grad, finite_diff_grad(obj, theta)) < 1e-4

    def test_terms_consistent(self, backend):
        X, Q, W, b, theta = problem(5, n_adapters=2, n_heads=2)
        obj, ce1, ce2, kl = backend.dual_loss_grad(X, Q, W, b, theta, R, 1.0, 3.0, False, False,
                                                   np.zeros_like(theta))
        assert obj == pytest.approx(ce1 + ce2 - 3.0 * kl, rel=1e-12)
        assert kl > 0

    def test_identical_adapters_have_zero_kl(self, backend):
        X, Q, W, b, theta = problem(6, n_adapters=2, n_heads=1)
        theta[R * D + H * R:2 * (R * D + H * R)] = theta[:R * D + H * R]
        _, ce1, ce2, kl = backend.dual_loss_grad(X, Q, W, b, theta, R, 1.0, 1.0, True, True,
                                                 np.zeros_like(theta))
        assert kl == pytest.approx(0.0, abs=1e-14) and ce1 == pytest.approx(ce2, rel=1e-14)

    def test_lambda_zero_is_two_ce_problems(self, backend):
        X, Q, W, b, theta = problem(8, n_adapters=2, n_heads=2)
        grad = np.zeros_like(theta)
        backend.dual_loss_grad(X, Q, W, b, theta, R, 1.0, 0.0, False, False, grad)
        a = R * D + H * R
        head = K * H + K
        single1 = np.concatenate([theta[:a], theta[2 * a:2 * a + head]])
        g1 = np.zeros_like(single1)
        backend.ce_loss_grad(X, Q, W, b, single1, R, 1.0, g1)
        np.testing.assert_allclose(grad[:a], g1[:a], atol=1e-14)
        np.testing.assert_allclose(grad[2 * a:2 * a + head], g1[a:], atol=1e-14)

    @pytest.mark.parametrize("symmetric", [False, True])
    def test_parity(self, symmetric):
        from loralab.kernels import numba_impl
        X, Q, W, b, theta = problem(11, n=33, n_adapters=2, n_heads=1)
        g1, g2 = np.zeros_like(theta), np.zeros_like(theta)
        t1 = numpy_impl.dual_loss_grad(X, Q, W, b, theta, R, 1.0, 2.0, symmetric, True, g1)
        t2 = numba_impl.dual_loss_grad(X, Q, W, b, theta, R, 1.0, 2.0, symmetric, True, g2)
        np.testing.assert_allclose(t1, t2, rtol=1e-12)
        np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-13)


class TestAdam:
    def test_first_step_moves_by_lr(self, backend):
        theta = np.array([1.0, -2.0, 0.5])
        g = np.array([0.3, -4.0, 0.0])
        m, v = np.zeros(3), np.zeros(3)
        backend.adam_update(theta, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8)
        # bias-corrected first step is lr * sign(g) (up to eps)
        np.testing.assert_allclose(theta, [0.9, -1.9, 0.5], atol=1e-7)

    def test_parity_over_steps(self, rng):
        from loralab.kernels import numba_impl
        t1 = rng.normal(size=10)
        t2 = t1.copy()
        state1 = [np.zeros(10), np.zeros(10)]
        state2 = [np.zeros(10), np.zeros(10)]
        for step in range(1, 20):
            g = rng.normal(size=10)
            numpy_impl.adam_update(t1, g, *state1, step, 0.01, 0.9, 0.999, 1e-8)
            numba_impl.adam_update(t2, g, *state2, step, 0.01, 0.9, 0.999, 1e-8)
        np.testing.assert_allclose(t1, t2, rtol=1e-12)


class TestTrainEpochs:
    def test_ce_epoch_parity(self):
        from loralab.kernels import numba_impl
        X, Q, W, b, theta = problem(2, n=70)
        order = np.random.default_rng(0).permutation(70)
        results = []
        for impl in (numpy_impl, numba_impl):
            t, m, v = theta.copy(), np.zeros_like(theta), np.zeros_like(theta)
            total, step = impl.train_epoch_ce(X, Q, order, 16, W, b, t, R, 1.0, m, v, 0, 0.01, 0.9, 0.999, 1e-8)
            results.append((t, total, step))
        assert results[0][2] == results[1][2] == 5
        assert results[0][1] == pytest.approx(results[1][1], rel=1e-10)
        np.testing.assert_allclose(results[0][0], results[1][0], rtol=1e-9, atol=1e-12)

    def test_dual_epoch_parity(self):
        from loralab.kernels import numba_impl
        X, Q, W, b, theta = problem(4, n=50, n_adapters=2, n_heads=2)
        order = np.arange(50)
        out = []
        for impl in (numpy_impl, numba_impl):
            t, m, v = theta.copy(), np.zeros_like(theta), np.zeros_like(theta)
            total, step = impl.train_epoch_dual(X, Q, order, 32, W, b, t, R, 1.0, 1.0, True, False,
                                                m, v, 3, 0.01, 0.9, 0.999, 1e-8)
            out.append((t, total, step))
        assert out[0][2] == out[1][2] == 5
        np.testing.assert_allclose(out[0][1], out[1][1], rtol=1e-10)
        np.testing.assert_allclose(out[0][0], out[1][0], rtol=1e-9, atol=1e-12)

    def test_ce_epoch_lowers_loss(self, backend):
        X, Q, W, b, theta = problem(7, n=64, soft=False)
        before = backend.ce_loss_grad(X, Q, W, b, theta, R, 1.0, np.zeros_like(theta))
        m, v, step = np.zeros_like(theta), np.zeros_like(theta), 0
        for _ in range(30):
            _, step = backend.train_epoch_ce(X, Q, np.arange(64), 16, W, b, theta, R, 1.0, m, v, step,
                                             0.01, 0.9, 0.999, 1e-8)
        assert backend.ce_loss_grad(X, Q, W, b, theta, R, 1.0, np.zeros_like(theta)) < before


class TestJacobi:
    @pytest.mark.parametrize("n", [1, 2, 5, 16, 32])
    def test_reconstruction(self, backend, n):
        a = np.random.default_rng(n).normal(size=(n, n))
        m = a + a.T
        w, v = backend.jacobi_eigh(m, 1e-14, 100)
        np.testing.assert_allclose(v @ np.diag(w) @ v.T, m, atol=1e-10)
        np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(m), atol=1e-10)

    def test_diagonal_input_untouched(self, backend):
        w, v = backend.jacobi_eigh(np.diag([3.0, 1.0, 2.0]), 1e-14, 10)
        np.testing.assert_array_equal(w, [3.0, 1.0, 2.0])
        np.testing.assert_array_equal(v, np.eye(3))

    def test_input_not_mutated(self, backend):
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        backend.jacobi_eigh(m, 1e-14, 10)
        np.testing.assert_array_equal(m, [[2.0, 1.0], [1.0, 2.0]])


class TestBackendSelection:
    @pytest.mark.parametrize("value,expected", [("numpy", "numpy"), ("numba", "numba"), (" NumPy ", "numpy")])
    def test_env_flag(self, value, expected):
        import os
        import subprocess
        import sys
        env = dict(os.environ, LORALAB_BACKEND=value)
        out = subprocess.run([sys.executable, "-c", "from loralab import kernels; print(kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == expected

    def test_unknown_backend_fails_import(self):
        import os
        import subprocess
        import sys
        env = dict(os.environ, LORALAB_BACKEND="cuda")
        out = subprocess.run([sys.executable, "-c", "import loralab.kernels"], env=env, capture_output=True,
                             text=True)
        assert out.returncode != 0 and "LORALAB_BACKEND" in out.stderr
