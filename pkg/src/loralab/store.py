"""Training sample store with evolving soft labels."""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .numerics import check_simplex

PSEUDO = 0
QUERIED = 1


class SampleStore:
    """Inputs, per-sample soft labels ``q``, provenance and the iteration each entry joined.

    ``q`` is the only mutable column; label refinement rewrites it in place.
    """

    def __init__(self, input_dim: int, num_classes: int):
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.x = np.empty((0, input_dim))
        self.q = np.empty((0, num_classes))
        self.provenance = np.empty(0, dtype=np.int8)
        self.iteration = np.empty(0, dtype=np.int64)

    @classmethod
    def from_arrays(cls, x, q, provenance=PSEUDO, iteration=0) -> "SampleStore":
        x = np.asarray(x, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        store = cls(x.shape[1], q.shape[1])
        store.add(x, q, provenance, iteration)
        return store

    def add(self, x, q, provenance: int, iteration: int) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.input_dim)
        q = np.asarray(q, dtype=np.float64).reshape(-1, self.num_classes)
        if len(x) != len(q):
            raise ContractViolation(f"{len(x)} inputs but {len(q)} labels")
        if len(x) == 0:
            return
        check_simplex(q, "soft labels")
        if provenance not in (PSEUDO, QUERIED):
            raise ContractViolation(f"unknown provenance {provenance}")
        self.x = np.concatenate([self.x, x])
        self.q = np.concatenate([self.q, q])
        self.provenance = np.concatenate([self.provenance, np.full(len(x), provenance, dtype=np.int8)])
        self.iteration = np.concatenate([self.iteration, np.full(len(x), iteration, dtype=np.int64)])

    def extend(self, other: "SampleStore") -> None:
        """Append another store's rows, carrying their current ``q`` forward."""
        self.x = np.concatenate([self.x, other.x])
        self.q = np.concatenate([self.q, other.q])
        self.provenance = np.concatenate([self.provenance, other.provenance])
        self.iteration = np.concatenate([self.iteration, other.iteration])

    def __len__(self) -> int:
        return len(self.x)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out
