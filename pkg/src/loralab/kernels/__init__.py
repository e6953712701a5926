"""Hot numeric kernels with a switchable backend.

``LORALAB_BACKEND=numpy`` forces the vectorised numpy path; the default is
``numba`` when it imports, else ``numpy``.  Results agree across backends to
roundoff, not bitwise, so determinism guarantees hold per backend.
"""

from __future__ import annotations

import os

from . import numpy_impl

_requested = os.environ.get("LORALAB_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"LORALAB_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numpy"
_impl = numpy_impl
if _requested == "numba":
    try:
        from . import numba_impl as _impl  # noqa: F811

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _impl = numpy_impl

split = numpy_impl.split
forward = _impl.forward
ce_loss_grad = _impl.ce_loss_grad
dual_loss_grad = _impl.dual_loss_grad
adam_update = _impl.adam_update
train_epoch_ce = _impl.train_epoch_ce
train_epoch_dual = _impl.train_epoch_dual
jacobi_eigh = _impl.jacobi_eigh

__all__ = [
    "BACKEND",
    "forward",
    "ce_loss_grad",
    "dual_loss_grad",
    "adam_update",
    "train_epoch_ce",
    "train_epoch_dual",
    "split",
    "jacobi_eigh",
]
