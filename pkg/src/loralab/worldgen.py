"""Synthetic task worlds and the parametric stand-in for prompt-driven image synthesis.

A world is an equal-weight isotropic Gaussian mixture, one component per
class.  The generator samples each intended class from a distorted copy of
its component: the mean is shifted by a fixed per-class drift, the variance
is inflated, and a fraction of draws comes from a different class while
keeping the intended pseudo-label.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation
from .numerics import softmax
from .rng import stream


@dataclass(frozen=True)
class TaskWorld:
    num_classes: int = 8
    input_dim: int = 16
    radius: float = 3.0
    cov_scale: float = 0.5
    seed: int = 42
    class_means: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.num_classes < 2 or self.input_dim < 2:
            raise ContractViolation("a world needs K >= 2 classes and d >= 2 dimensions")
        if self.radius <= 0 or self.cov_scale <= 0:
            raise ContractViolation("radius and cov_scale must be positive")
        object.__setattr__(self, "class_means", _place_means(self))

    @property
    def sigma(self) -> float:
        return math.sqrt(self.cov_scale)

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "input_dim": self.input_dim,
                "radius": self.radius, "cov_scale": self.cov_scale, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskWorld":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _place_means(world: TaskWorld) -> np.ndarray:
    """Uniform points on the sphere, one repulsion pass, resample until separated."""
    K, d, R = world.num_classes, world.input_dim, world.radius
    min_dist = R / 2.0
    rng = stream(world.seed, "class-means")
    for _ in range(1000):
        m = rng.normal(size=(K, d))
        m *= R / np.linalg.norm(m, axis=1, keepdims=True)
        push = np.zeros_like(m)
        for i in range(K):
            for j in range(K):
                if i == j:
                    continue
                diff = m[i] - m[j]
                dist = np.linalg.norm(diff)
                if dist < min_dist:
                    push[i] += 0.5 * (min_dist - dist) * diff / max(dist, 1e-12)
        m += push
        m *= R / np.linalg.norm(m, axis=1, keepdims=True)
        gaps = np.linalg.norm(m[:, None, :] - m[None, :, :], axis=2) + np.eye(K) * 2 * R
        if gaps.min() >= min_dist:
            return m
    raise ContractViolation(f"could not place {K} separated means in {d} dimensions")


@dataclass(frozen=True)
class GeneratorConfig:
    mean_drift: float = 0.5
    cov_inflation: float = 2.0
    label_noise: float = 0.1
    variation_seed: int = 7

    def __post_init__(self):
        if self.mean_drift < 0:
            raise ContractViolation("mean_drift must be >= 0")
        if self.cov_inflation < 1:
            raise ContractViolation("cov_inflation must be >= 1")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ContractViolation("label_noise must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


PERFECT_GENERATOR = GeneratorConfig(0.0, 1.0, 0.0)


@dataclass
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class PseudoLabeledSet:
    x: np.ndarray
    pseudo_labels: np.ndarray
    source: str = "generator"
    # component each sample was actually drawn from; lab bookkeeping, not attacker-visible
    drawn_from: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.pseudo_labels)


def sample_labeled(world: TaskWorld, n_per_class: int, rng: np.random.Generator) -> LabeledSet:
    """``n_per_class`` draws from every class component, grouped by class."""
    if n_per_class < 1:
        raise ContractViolation("n_per_class must be >= 1")
    K, d = world.num_classes, world.input_dim
    y = np.repeat(np.arange(K), n_per_class)
    x = world.class_means[y] + world.sigma * rng.standard_normal((K * n_per_class, d))
    return LabeledSet(x, y)


def generator_drift(world: TaskWorld, gen: GeneratorConfig) -> np.ndarray:
    """Per-class systematic bias: a fixed random unit direction scaled by the drift."""
    u = stream(gen.variation_seed, "drift", world.seed).normal(size=(world.num_classes, world.input_dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return gen.mean_drift * u


def synth_candidates(world: TaskWorld, gen: GeneratorConfig, counts,
                     rng: np.random.Generator) -> PseudoLabeledSet:
    """Generate ``counts[i]`` samples intended for class ``i``, pseudo-labelled ``i``."""
    counts = np.asarray(counts, dtype=np.int64)
    K, d = world.num_classes, world.input_dim
    if counts.shape != (K,) or np.any(counts < 0):
        raise ContractViolation(f"counts must be {K} non-negative integers")
    labels = np.repeat(np.arange(K), counts)
    n = labels.size
    swap = rng.random(n) < gen.label_noise
    other = (labels + rng.integers(1, K, size=n)) % K
    source = np.where(swap, other, labels)
    centres = world.class_means + generator_drift(world, gen)
    noise = rng.standard_normal((n, d))
    x = centres[source] + math.sqrt(gen.cov_inflation) * world.sigma * noise
    return PseudoLabeledSet(x, labels, "generator", source)


def balanced_counts(num_classes: int, total: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Split ``total`` over classes as evenly as possible; leftovers go to random classes."""
    counts = np.full(num_classes, total // num_classes, dtype=np.int64)
    rest = total - counts.sum()
    if rest:
        picks = (rng.permutation(num_classes) if rng is not None else np.arange(num_classes))[:rest]
        counts[picks] += 1
    return counts


def sample_ood(world: TaskWorld, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws on the cube [-2R, 2R]^d, unrelated to the class structure."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    lim = 2.0 * world.radius
    return rng.uniform(-lim, lim, size=(n, world.input_dim))


def log_density(world: TaskWorld, x) -> np.ndarray:
    """Log of the equal-weight mixture density at each row of ``x``."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    var = world.cov_scale
    sq = ((X[:, None, :] - world.class_means[None]) ** 2).sum(axis=2)
    comp = -0.5 * sq / var - 0.5 * world.input_dim * math.log(2 * math.pi * var)
    top = comp.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(comp - top).sum(axis=1, keepdims=True)))[:, 0] - math.log(world.num_classes)


def bayes_posterior(world: TaskWorld, x) -> np.ndarray:
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != world.input_dim:
        raise ContractViolation(f"expected length-{world.input_dim} inputs")
    sq = ((X[:, None, :] - world.class_means[None]) ** 2).sum(axis=2)
    return softmax(-0.5 * sq / world.cov_scale)


def bayes_label(world: TaskWorld, x) -> tuple[int, np.ndarray]:
    """Exact class posterior under equal priors and its argmax."""
    post = bayes_posterior(world, x)[0]
    return int(np.argmax(post)), post


class BayesClassifier:
    """Predictor wrapper around the exact posterior, usable wherever a model is."""

    def __init__(self, world: TaskWorld):
        self.world = world

    def predict_proba(self, x) -> np.ndarray:
        return bayes_posterior(self.world, x)

    def predict_classes(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)
