"""Loop kernels compiled with numba; same contracts and layout as ``numpy_impl``.

Inner loops run over contiguous, element-wise updates (transposed weight
copies) so LLVM can vectorise them without fastmath reassociation.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from . import numpy_impl


@njit(cache=True, inline="always")
def _tanh(x):
    e = math.exp(-2.0 * abs(x))
    t = (1.0 - e) / (1.0 + e)
    return t if x >= 0.0 else -t


@njit(cache=True)
def _effective_t(W, A, B, scale):
    """(W + scale * B @ A) transposed, shape (d, h)."""
    h, d = W.shape
    r = A.shape[0]
    out = np.empty((d, h))
    for k in range(d):
        for j in range(h):
            acc = 0.0
            for t in range(r):
                acc += B[j, t] * A[t, k]
            out[k, j] = W[j, k] + scale * acc
    return out


@njit(cache=True)
def _branch(x, WeffT, b, WhT, bh, hid, logp):
    d, h = WeffT.shape
    K = bh.shape[0]
    for j in range(h):
        hid[j] = b[j]
    for k in range(d):
        xk = x[k]
        for j in range(h):
            hid[j] += WeffT[k, j] * xk
    for j in range(h):
        hid[j] = _tanh(hid[j])
    for c in range(K):
        logp[c] = bh[c]
    for j in range(h):
        hj = hid[j]
        for c in range(K):
            logp[c] += WhT[j, c] * hj
    zmax = logp[0]
    for c in range(1, K):
        if logp[c] > zmax:
            zmax = logp[c]
    tot = 0.0
    for c in range(K):
        tot += math.exp(logp[c] - zmax)
    lse = zmax + math.log(tot)
    for c in range(K):
        logp[c] -= lse


@njit(cache=True)
def _backward(x, hid, dz, Wh, gWh, gbh, gWeffT, dh):
    K, h = Wh.shape
    d = x.shape[0]
    for j in range(h):
        dh[j] = 0.0
    for c in range(K):
        dzc = dz[c]
        gbh[c] += dzc
        for j in range(h):
            gWh[c, j] += dzc * hid[j]
            dh[j] += dzc * Wh[c, j]
    for j in range(h):
        dh[j] *= 1.0 - hid[j] * hid[j]
    for k in range(d):
        xk = x[k]
        for j in range(h):
            gWeffT[k, j] += xk * dh[j]


@njit(cache=True)
def _lora_chain(gWeffT, A, B, scale, gA, gB):
    d, h = gWeffT.shape
    r = A.shape[0]
    for t in range(r):
        for k in range(d):
            acc = 0.0
            for j in range(h):
                acc += B[j, t] * gWeffT[k, j]
            gA[t, k] += scale * acc
    for j in range(h):
        for t in range(r):
            acc = 0.0
            for k in range(d):
                acc += gWeffT[k, j] * A[t, k]
            gB[j, t] += scale * acc


@njit(cache=True)
def _views(theta, r, d, h, K, n_adapters, n_heads):
    """Adapters then heads; returns (A1, B1, A2, B2, Wh1, bh1, Wh2, bh2) with aliases filled in."""
    pos = 0
    A1 = theta[pos:pos + r * d].reshape((r, d))
    pos += r * d
    B1 = theta[pos:pos + h * r].reshape((h, r))
    pos += h * r
    A2 = A1
    B2 = B1
    if n_adapters == 2:
        A2 = theta[pos:pos + r * d].reshape((r, d))
        pos += r * d
        B2 = theta[pos:pos + h * r].reshape((h, r))
        pos += h * r
    Wh1 = theta[pos:pos + K * h].reshape((K, h))
    pos += K * h
    bh1 = theta[pos:pos + K]
    pos += K
    Wh2 = Wh1
    bh2 = bh1
    if n_heads == 2:
        Wh2 = theta[pos:pos + K * h].reshape((K, h))
        pos += K * h
        bh2 = theta[pos:pos + K]
    return A1, B1, A2, B2, Wh1, bh1, Wh2, bh2


BLAS_FORWARD_ROWS = 256


def forward(X, W, b, Wh, bh):
    """Logits for a batch.  Large batches are BLAS-bound and go through the numpy path."""
    if X.shape[0] >= BLAS_FORWARD_ROWS:
        return numpy_impl.forward(X, W, b, Wh, bh)
    return _forward_loop(X, W, b, Wh, bh)


@njit(cache=True)
def _forward_loop(X, W, b, Wh, bh):
    n = X.shape[0]
    K = Wh.shape[0]
    WT = np.ascontiguousarray(W.T)
    WhT = np.ascontiguousarray(Wh.T)
    hid = np.empty(W.shape[0])
    z = np.empty(K)
    out = np.empty((n, K))
    d, h = WT.shape
    for i in range(n):
        for j in range(h):
            hid[j] = b[j]
        for k in range(d):
            xk = X[i, k]
            for j in range(h):
                hid[j] += WT[k, j] * xk
        for c in range(K):
            z[c] = bh[c]
        for j in range(h):
            hj = _tanh(hid[j])
            for c in range(K):
                z[c] += WhT[j, c] * hj
        for c in range(K):
            out[i, c] = z[c]
    return out


@njit(cache=True)
def _ce_rows(X, Q, rows, W, b, theta, r, scale, grad):
    d = X.shape[1]
    h = W.shape[0]
    K = Q.shape[1]
    A, B, _a, _b, Wh, bh, _w, _c = _views(theta, r, d, h, K, 1, 1)
    gA, gB, _ga, _gb, gWh, gbh, _gw, _gc = _views(grad, r, d, h, K, 1, 1)
    grad[:] = 0.0
    WeffT = _effective_t(W, A, B, scale)
    WhT = np.ascontiguousarray(Wh.T)
    gWeffT = np.zeros((d, h))
    hid = np.empty(h)
    dh = np.empty(h)
    logp = np.empty(K)
    dz = np.empty(K)
    inv_n = 1.0 / rows.shape[0]
    loss = 0.0
    for i in rows:
        x = X[i]
        _branch(x, WeffT, b, WhT, bh, hid, logp)
        qs = 0.0
        for c in range(K):
            qs += Q[i, c]
        for c in range(K):
            loss -= Q[i, c] * logp[c]
            dz[c] = (math.exp(logp[c]) * qs - Q[i, c]) * inv_n
        _backward(x, hid, dz, Wh, gWh, gbh, gWeffT, dh)
    _lora_chain(gWeffT, A, B, scale, gA, gB)
    return loss * inv_n


@njit(cache=True)
def _dual_rows(X, Q, rows, W, b, theta, r, scale, lam, symmetric, shared_head, grad, out):
    d = X.shape[1]
    h = W.shape[0]
    K = Q.shape[1]
    n_heads = 1 if shared_head else 2
    A1, B1, A2, B2, Wh1, bh1, Wh2, bh2 = _views(theta, r, d, h, K, 2, n_heads)
    gA1, gB1, gA2, gB2, gWh1, gbh1, gWh2, gbh2 = _views(grad, r, d, h, K, 2, n_heads)
    grad[:] = 0.0
    W1T = _effective_t(W, A1, B1, scale)
    W2T = _effective_t(W, A2, B2, scale)
    Wh1T = np.ascontiguousarray(Wh1.T)
    Wh2T = np.ascontiguousarray(Wh2.T)
    gW1T = np.zeros((d, h))
    gW2T = np.zeros((d, h))
    hid1 = np.empty(h)
    hid2 = np.empty(h)
    dh = np.empty(h)
    lp1 = np.empty(K)
    lp2 = np.empty(K)
    p1 = np.empty(K)
    p2 = np.empty(K)
    dz1 = np.empty(K)
    dz2 = np.empty(K)
    inv_n = 1.0 / rows.shape[0]
    ce1 = 0.0
    ce2 = 0.0
    kl = 0.0
    for i in rows:
        x = X[i]
        _branch(x, W1T, b, Wh1T, bh1, hid1, lp1)
        _branch(x, W2T, b, Wh2T, bh2, hid2, lp2)
        qs = 0.0
        kl_row = 0.0
        kl_row2 = 0.0
        for c in range(K):
            qs += Q[i, c]
            p1[c] = math.exp(lp1[c])
            p2[c] = math.exp(lp2[c])
            ce1 -= Q[i, c] * lp1[c]
            ce2 -= Q[i, c] * lp2[c]
            kl_row += p1[c] * (lp1[c] - lp2[c])
            kl_row2 += p2[c] * (lp2[c] - lp1[c])
        kl += kl_row
        for c in range(K):
            g = lp1[c] - lp2[c]
            dz1[c] = (p1[c] * qs - Q[i, c] - lam * p1[c] * (g - kl_row)) * inv_n
            dz2[c] = (p2[c] * qs - Q[i, c] - lam * (p2[c] - p1[c])) * inv_n
        if symmetric:
            kl += kl_row2
            for c in range(K):
                dz2[c] -= lam * p2[c] * (lp2[c] - lp1[c] - kl_row2) * inv_n
                dz1[c] -= lam * (p1[c] - p2[c]) * inv_n
        _backward(x, hid1, dz1, Wh1, gWh1, gbh1, gW1T, dh)
        _backward(x, hid2, dz2, Wh2, gWh2, gbh2, gW2T, dh)
    _lora_chain(gW1T, A1, B1, scale, gA1, gB1)
    _lora_chain(gW2T, A2, B2, scale, gA2, gB2)
    ce1 *= inv_n
    ce2 *= inv_n
    kl *= inv_n
    out[0] = ce1 + ce2 - lam * kl
    out[1] = ce1
    out[2] = ce2
    out[3] = kl


@njit(cache=True)
def ce_loss_grad(X, Q, W, b, theta, rank, scale, grad):
    return _ce_rows(X, Q, np.arange(X.shape[0]), W, b, theta, rank, scale, grad)


@njit(cache=True)
def dual_loss_grad(X, Q, W, b, theta, rank, scale, lam, symmetric, shared_head, grad):
    out = np.empty(4)
    _dual_rows(X, Q, np.arange(X.shape[0]), W, b, theta, rank, scale, lam, symmetric,
               shared_head, grad, out)
    return out


@njit(cache=True)
def adam_update(theta, g, m, v, step, lr, beta1, beta2, eps):
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for i in range(theta.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        theta[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)


@njit(cache=True)
def train_epoch_ce(X, Q, order, batch_size, W, b, theta, rank, scale,
                   m, v, step, lr, beta1, beta2, eps):
    grad = np.zeros_like(theta)
    total = 0.0
    n = order.shape[0]
    for start in range(0, n, batch_size):
        rows = order[start:min(start + batch_size, n)]
        total += _ce_rows(X, Q, rows, W, b, theta, rank, scale, grad) * rows.shape[0]
        step += 1
        adam_update(theta, grad, m, v, step, lr, beta1, beta2, eps)
    return total, step


@njit(cache=True)
def train_epoch_dual(X, Q, order, batch_size, W, b, theta, rank, scale, lam, symmetric, shared_head,
                     m, v, step, lr, beta1, beta2, eps):
    grad = np.zeros_like(theta)
    total = np.zeros(4)
    out = np.empty(4)
    n = order.shape[0]
    for start in range(0, n, batch_size):
        rows = order[start:min(start + batch_size, n)]
        _dual_rows(X, Q, rows, W, b, theta, rank, scale, lam, symmetric, shared_head, grad, out)
        total += out * rows.shape[0]
        step += 1
        adam_update(theta, grad, m, v, step, lr, beta1, beta2, eps)
    return total, step


jacobi_eigh = njit(cache=True)(numpy_impl.jacobi_eigh)
