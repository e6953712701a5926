"""Vectorised numpy kernels.

Reference path, and the fallback when numba is disabled.  Shapes:
X (n, d), Q (n, K), frozen W (h, d) and b (h,).  Trainable parameters
live in a flat vector ``theta`` laid out as

    single model:  A (r, d) | B (h, r) | Wh (K, h) | bh (K,)
    adapter pair:  A1 | B1 | A2 | B2 | Wh1 | bh1 [| Wh2 | bh2 unless shared_head]

Gradient buffers share the layout and hold batch means.
"""

from __future__ import annotations

import numpy as np


def split(theta, r, d, h, K, n_adapters=1, n_heads=1):
    """Reshaped views of a flat parameter vector, adapters first then heads."""
    out, pos = [], 0
    for shape in [(r, d), (h, r)] * n_adapters + [(K, h), (K,)] * n_heads:
        size = int(np.prod(shape))
        out.append(theta[pos:pos + size].reshape(shape))
        pos += size
    return out


def forward(X, W, b, Wh, bh):
    H = np.tanh(X @ W.T + b)
    return H @ Wh.T + bh


def _log_softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def _branch(X, W, b, A, B, scale, Wh, bh):
    H = np.tanh(X @ (W + scale * (B @ A)).T + b)
    return H, _log_softmax(H @ Wh.T + bh)


def _backprop(X, H, dZ, A, B, scale, Wh, gA, gB, gWh, gbh):
    gWh += dZ.T @ H
    gbh += dZ.sum(axis=0)
    dpre = (dZ @ Wh) * (1.0 - H * H)
    gWeff = dpre.T @ X
    gA += scale * (B.T @ gWeff)
    gB += scale * (gWeff @ A.T)


def ce_loss_grad(X, Q, W, b, theta, rank, scale, grad):
    """Mean soft-label cross-entropy; its gradient is written into ``grad``."""
    n, d = X.shape
    h, K = W.shape[0], Q.shape[1]
    A, B, Wh, bh = split(theta, rank, d, h, K)
    H, logp = _branch(X, W, b, A, B, scale, Wh, bh)
    dZ = (np.exp(logp) * Q.sum(axis=1, keepdims=True) - Q) / n
    grad[:] = 0.0
    _backprop(X, H, dZ, A, B, scale, Wh, *split(grad, rank, d, h, K))
    return -(Q * logp).sum() / n


def dual_loss_grad(X, Q, W, b, theta, rank, scale, lam, symmetric, shared_head, grad):
    """Objective ce1 + ce2 - lam * KL(p1 || p2), plus KL(p2 || p1) when symmetric.

    Returns [objective, ce1, ce2, kl]; the gradient goes into ``grad``.
    """
    n, d = X.shape
    h, K = W.shape[0], Q.shape[1]
    n_heads = 1 if shared_head else 2
    A1, B1, A2, B2, *heads = split(theta, rank, d, h, K, 2, n_heads)
    gA1, gB1, gA2, gB2, *gheads = split(grad, rank, d, h, K, 2, n_heads)
    if shared_head:
        heads, gheads = heads * 2, gheads * 2
    Wh1, bh1, Wh2, bh2 = heads
    H1, logp1 = _branch(X, W, b, A1, B1, scale, Wh1, bh1)
    H2, logp2 = _branch(X, W, b, A2, B2, scale, Wh2, bh2)
    P1, P2 = np.exp(logp1), np.exp(logp2)
    qs = Q.sum(axis=1, keepdims=True)
    ce1 = -(Q * logp1).sum() / n
    ce2 = -(Q * logp2).sum() / n
    G = logp1 - logp2
    kl_rows = (P1 * G).sum(axis=1, keepdims=True)
    kl = kl_rows.sum() / n
    dZ1 = (P1 * qs - Q - lam * P1 * (G - kl_rows)) / n
    dZ2 = (P2 * qs - Q - lam * (P2 - P1)) / n
    if symmetric:
        kl_rows2 = (P2 * -G).sum(axis=1, keepdims=True)
        kl += kl_rows2.sum() / n
        dZ2 -= lam * P2 * (-G - kl_rows2) / n
        dZ1 -= lam * (P1 - P2) / n
    grad[:] = 0.0
    _backprop(X, H1, dZ1, A1, B1, scale, Wh1, gA1, gB1, gheads[0], gheads[1])
    _backprop(X, H2, dZ2, A2, B2, scale, Wh2, gA2, gB2, gheads[2], gheads[3])
    return np.array([ce1 + ce2 - lam * kl, ce1, ce2, kl])


def adam_update(theta, g, m, v, step, lr, beta1, beta2, eps):
    """One in-place Adam step; ``step`` is the 1-based step count."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def train_epoch_ce(X, Q, order, batch_size, W, b, theta, rank, scale,
                   m, v, step, lr, beta1, beta2, eps):
    """Adam over consecutive minibatches of ``order``; returns (sum of batch-loss * size, step)."""
    grad = np.zeros_like(theta)
    total = 0.0
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        total += ce_loss_grad(X[idx], Q[idx], W, b, theta, rank, scale, grad) * idx.size
        step += 1
        adam_update(theta, grad, m, v, step, lr, beta1, beta2, eps)
    return total, step


def train_epoch_dual(X, Q, order, batch_size, W, b, theta, rank, scale, lam, symmetric, shared_head,
                     m, v, step, lr, beta1, beta2, eps):
    """Dual-adapter counterpart of ``train_epoch_ce``; sums are [objective, ce1, ce2, kl]."""
    grad = np.zeros_like(theta)
    total = np.zeros(4)
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        total += dual_loss_grad(X[idx], Q[idx], W, b, theta, rank, scale, lam, symmetric,
                                shared_head, grad) * idx.size
        step += 1
        adam_update(theta, grad, m, v, step, lr, beta1, beta2, eps)
    return total, step


def jacobi_eigh(M, tol, max_sweeps):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors as columns), unsorted.
    """
    n = M.shape[0]
    a = M.copy()
    V = np.eye(n)
    scale = np.sqrt((a * a).sum())
    for _ in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += a[p, q] * a[p, q]
        if np.sqrt(2.0 * off) <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300 + 1e-18 * (abs(a[p, p]) + abs(a[q, q])):
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    return np.diag(a).copy(), V
