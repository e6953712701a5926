"""Accuracy, attack success rate, victim/substitute divergence and dataset Frechet distance."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .numerics import frechet_distance, log_softmax, softmax


def accuracy(model, x, y) -> float:
    """Percentage of rows whose argmax prediction equals the label.

    ``model`` is anything with ``predict_classes``, or a plain callable
    mapping a batch of inputs to class indices.
    """
    y = np.asarray(y)
    if y.size == 0:
        raise ContractViolation("accuracy needs a non-empty test set")
    predict = getattr(model, "predict_classes", model)
    pred = np.asarray(predict(np.asarray(x, dtype=np.float64)))
    return 100.0 * float(np.mean(pred == y))


def asr(substitute_acc: float, victim_acc: float) -> float:
    """Attack success rate: substitute accuracy relative to the victim's, in percent."""
    if victim_acc <= 0:
        raise ContractViolation("victim accuracy must be positive")
    return 100.0 * substitute_acc / victim_acc


@dataclass
class DivergenceProfile:
    id_values: np.ndarray
    ood_values: np.ndarray

    @property
    def id_mean(self) -> float:
        return float(self.id_values.mean())

    @property
    def ood_mean(self) -> float:
        return float(self.ood_values.mean())

    def summary(self) -> dict:
        return {"id_n": int(self.id_values.size), "ood_n": int(self.ood_values.size),
                "id_mean": self.id_mean, "ood_mean": self.ood_mean}

    def write_csv(self, path) -> Path:
        """Rows of (cohort, value); a comment line on top records the cohort sizes."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(f"# id_n={self.id_values.size} ood_n={self.ood_values.size}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cohort", "value"])
            for v in self.id_values:
                w.writerow(["id", repr(float(v))])
            for v in self.ood_values:
                w.writerow(["ood", repr(float(v))])
        return path


def _pairwise_ce(victim, substitute, x) -> np.ndarray:
    p = softmax(victim.logits(x))
    return -(p * log_softmax(substitute.logits(x))).sum(axis=1)


def divergence_profile(victim, substitute, id_x, ood_x) -> DivergenceProfile:
    """Per-sample CE with the victim's softmax as target and the substitute's logits as prediction."""
    if len(id_x) == 0 or len(ood_x) == 0:
        raise ContractViolation("both cohorts must be non-empty")
    return DivergenceProfile(_pairwise_ce(victim, substitute, id_x),
                             _pairwise_ce(victim, substitute, ood_x))


def moments(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    centred = x - mu
    return mu, centred.T @ centred / (len(x) - 1)


def dataset_frechet(a, b) -> float:
    """Frechet distance between Gaussian fits of two sample sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation("sample sets must be 2-D with the same width")
    d = a.shape[1]
    if len(a) <= d + 1 or len(b) <= d + 1:
        raise ContractViolation(f"need more than {d + 1} samples per set, got {len(a)} and {len(b)}")
    mu_a, cov_a = moments(a)
    mu_b, cov_b = moments(b)
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)
