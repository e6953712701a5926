"""Dense numerics: probability primitives, EMA, matrix square root, Frechet distance.

Vectors and matrices are plain float64 numpy arrays.  Functions that take a
single vector also accept a 2-D batch and work along the last axis.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import kernels
from .errors import ContractViolation

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9
SYMMETRY_TOL = 1e-8
NEG_EIG_TOL = 1e-8


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} has non-finite entries")
    return a


def _as_vectors(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim not in (1, 2) or a.shape[-1] == 0:
        raise ContractViolation(f"{name} must be a non-empty vector or batch, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} has non-finite entries")
    return a


def check_simplex(p, name: str = "probability vector") -> np.ndarray:
    """Validate that ``p`` (or every row of it) lies on the probability simplex."""
    a = _as_vectors(p, name)
    if np.any(a < -SIMPLEX_TOL) or np.any(np.abs(a.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ContractViolation(f"{name} is not on the simplex")
    return a


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: length mismatch {a.shape} vs {b.shape}")


def log_softmax(logits) -> np.ndarray:
    z = _as_vectors(logits, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax along the last axis."""
    z = _as_vectors(logits, "logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, target):
    """``-sum(q * log softmax(z))``; a scalar, or one value per row for batches."""
    z = _as_vectors(logits, "logits")
    q = check_simplex(target, "target")
    _same_shape(z, q, "cross_entropy")
    out = -(q * log_softmax(z)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p):
    q = check_simplex(p)
    terms = np.where(q > 0, q * np.log(np.maximum(q, PROB_FLOOR)), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_divergence(p, q):
    """``sum p log(p / q)`` with q floored at 1e-12; zero-mass terms of p drop out."""
    p = check_simplex(p, "p")
    q = check_simplex(q, "q")
    _same_shape(p, q, "kl_divergence")
    safe_p = np.maximum(p, PROB_FLOOR)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, PROB_FLOOR))), 0.0)
    out = np.maximum(terms.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def ema_update(q, p, mu: float) -> np.ndarray:
    """Soft-label moving average ``mu * q + (1 - mu) * p``."""
    if not 0.0 <= mu <= 1.0:
        raise ContractViolation(f"EMA momentum must lie in [0, 1], got {mu}")
    q = _as_vectors(q, "q")
    p = _as_vectors(p, "p")
    _same_shape(q, p, "ema_update")
    return mu * q + (1.0 - mu) * p


def eigh(m) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition via cyclic Jacobi, eigenvalues ascending."""
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise ContractViolation(f"eigh needs a square matrix, got {a.shape}")
    sym = 0.5 * (a + a.T)
    w, v = kernels.jacobi_eigh(np.ascontiguousarray(sym), 1e-15, 100)
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def sym_sqrt(m) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix."""
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise ContractViolation(f"sym_sqrt needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise ContractViolation("sym_sqrt input is not symmetric")
    w, v = eigh(a)
    if w.size and w.min() < -NEG_EIG_TOL * scale:
        raise ContractViolation(f"sym_sqrt input has negative eigenvalue {w.min():.3e}")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Frechet distance between two Gaussians given their moments."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    c1 = as_matrix(np.atleast_2d(cov1), "cov1")
    c2 = as_matrix(np.atleast_2d(cov2), "cov2")
    d = mu1.shape[0]
    if mu2.shape != (d,) or c1.shape != (d, d) or c2.shape != (d, d):
        raise ContractViolation(
            f"frechet_distance dimension mismatch: {mu1.shape}, {c1.shape}, {mu2.shape}, {c2.shape}"
        )
    s1 = sym_sqrt(c1)
    inner = s1 @ c2 @ s1
    cross = np.trace(sym_sqrt(0.5 * (inner + inner.T)))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * cross)
    return max(value, 0.0)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ContractViolation(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(x.shape)
