"""Victim construction and the metered black-box query oracle."""

from __future__ import annotations

import threading
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BudgetExhausted, ContractViolation
from .metrics import accuracy
from .nnet import AdaptedClassifier, Backbone, ModelDims, TrainConfig, label_refine_train
from .numerics import softmax
from .rng import derive_seed, stream
from .store import PSEUDO, SampleStore, one_hot
from .worldgen import LabeledSet, TaskWorld, sample_labeled

SOFT = "soft"
HARD = "hard"
LABEL_MODES = (SOFT, HARD)


@dataclass(frozen=True)
class VictimDataConfig:
    n_per_class: int = 200
    test_per_class: int = 200
    hidden_dim: int = 32
    rank: int = 4
    alpha: float | None = None
    backbone_seed: int = 1000
    seed: int = 42

    def dims(self, world: TaskWorld) -> ModelDims:
        return ModelDims(world.input_dim, self.hidden_dim, world.num_classes, self.rank, self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)


def victim_datasets(world: TaskWorld, data_cfg: VictimDataConfig) -> tuple[LabeledSet, LabeledSet]:
    """The victim's private training set and its held-out test set."""
    train = sample_labeled(world, data_cfg.n_per_class, stream(data_cfg.seed, "victim-train", world.seed))
    test = sample_labeled(world, data_cfg.test_per_class, stream(data_cfg.seed, "victim-test", world.seed))
    return train, test


def victim_backbone(world: TaskWorld, data_cfg: VictimDataConfig) -> Backbone:
    return Backbone.from_seed(data_cfg.backbone_seed, world.input_dim, data_cfg.hidden_dim)


def train_victim(world: TaskWorld, data_cfg: VictimDataConfig = VictimDataConfig(),
                 train_cfg: TrainConfig = TrainConfig()) -> tuple[AdaptedClassifier, float]:
    """Fine-tune adapter and head on one-hot labels; return the model and its test accuracy."""
    train, test = victim_datasets(world, data_cfg)
    model = AdaptedClassifier.create(victim_backbone(world, data_cfg), data_cfg.dims(world),
                                     derive_seed(data_cfg.seed, "victim-init"))
    if train_cfg.epochs > 0:
        store = SampleStore.from_arrays(train.x, one_hot(train.y, world.num_classes), PSEUDO)
        cfg = train_cfg.replace(mu=1.0, seed=derive_seed(data_cfg.seed, "victim-train-cfg", train_cfg.seed))
        label_refine_train(model, store, cfg)
    return model, accuracy(model, test.x, test.y)


class VictimOracle:
    """Query endpoint over a victim with a label mode, a budget meter and an optional defense pair.

    With a secondary model present every input in a batch is answered by the
    primary or the secondary model, chosen by a fair coin from the selection
    stream.  Budget checks, selection draws and the decrement happen under one
    lock, so concurrent batches are atomic.
    """

    def __init__(self, model: AdaptedClassifier, budget: int, label_mode: str = SOFT,
                 secondary: AdaptedClassifier | None = None, selection_seed: int = 0):
        if label_mode not in LABEL_MODES:
            raise ContractViolation(f"label mode must be one of {LABEL_MODES}, got {label_mode!r}")
        if budget < 0:
            raise ContractViolation("budget must be >= 0")
        if secondary is not None:
            if secondary.dims != model.dims:
                raise ContractViolation("defense models must share dimensions")
        self.model = model
        self.secondary = secondary
        self.label_mode = label_mode
        self.total = int(budget)
        self._remaining = int(budget)
        self._select = stream(selection_seed, "defense-select")
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return self._remaining

    @property
    def answered(self) -> int:
        return self.total - self._remaining

    @property
    def input_dim(self) -> int:
        return self.model.backbone.input_dim

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    @property
    def defended(self) -> bool:
        return self.secondary is not None

    def _encode(self, probs: np.ndarray) -> np.ndarray:
        if self.label_mode == HARD:
            return one_hot(np.argmax(probs, axis=1), self.num_classes)
        return probs

    def candidate_answers(self, x) -> tuple[np.ndarray, np.ndarray | None]:
        """What each deployed model would answer; lab-side, never charged."""
        a = self._encode(softmax(self.model.logits(x)))
        b = None if self.secondary is None else self._encode(softmax(self.secondary.logits(x)))
        return a, b

    def query(self, x) -> np.ndarray:
        """Answer a batch or refuse it whole; returns one probability (or one-hot) row per input."""
        X = np.asarray(x, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ContractViolation(f"queries must be an (n, {self.input_dim}) batch")
        n = len(X)
        with self._lock:
            if n > self._remaining:
                raise BudgetExhausted(self._remaining, n)
            if n == 0:
                return np.empty((0, self.num_classes))
            probs = softmax(self.model.logits(X))
            if self.secondary is not None:
                use_b = self._select.random(n) < 0.5
                probs = np.where(use_b[:, None], softmax(self.secondary.logits(X)), probs)
            self._remaining -= n
        return self._encode(probs)


def query(oracle, x) -> np.ndarray:
    return oracle.query(x)
