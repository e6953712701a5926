"""Frozen tanh backbone + rank-r LoRA adapter + linear head, trained with Adam.

Trainable parameters of a classifier live in one flat float64 vector
(``model.params``); ``adapter.down``, ``adapter.up``, ``head.weight`` and
``head.bias`` are reshaped views into it, so the optimiser updates a single
buffer and the kernels read the views.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ContractViolation
from .numerics import ema_update, softmax
from .rng import stream
from .store import SampleStore

CHECKPOINT_FORMAT = "loralab.checkpoint"
CHECKPOINT_VERSION = 1
ADAPTER_INIT_STD = 0.02


@dataclass(frozen=True)
class ModelDims:
    input_dim: int = 16
    hidden_dim: int = 32
    num_classes: int = 8
    rank: int = 4
    alpha: float | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractViolation("need at least two classes")
        if not 1 <= self.rank <= min(self.hidden_dim, self.input_dim):
            raise ContractViolation(
                f"rank {self.rank} outside [1, min({self.hidden_dim}, {self.input_dim})]"
            )

    @property
    def lora_alpha(self) -> float:
        return float(self.rank if self.alpha is None else self.alpha)


class Backbone:
    """Frozen affine layer followed by tanh; fully determined by its seed."""

    def __init__(self, weight, bias, seed: int | None = None):
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)
        self.seed = seed

    @classmethod
    def from_seed(cls, seed: int, input_dim: int, hidden_dim: int) -> "Backbone":
        rng = stream(seed, "backbone")
        weight = rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=(hidden_dim, input_dim))
        bias = rng.normal(0.0, 0.1, size=hidden_dim)
        return cls(weight, bias, seed)

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class LoraAdapter:
    down: np.ndarray  # A, rank x input_dim
    up: np.ndarray  # B, hidden_dim x rank
    alpha: float

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class Head:
    weight: np.ndarray  # num_classes x hidden_dim
    bias: np.ndarray


def delta_weight(adapter: LoraAdapter) -> np.ndarray:
    """The low-rank update ``(alpha / r) * B @ A``."""
    return adapter.scale * (adapter.up @ adapter.down)


def _layout(dims: ModelDims, n_adapters: int = 1, n_heads: int = 1):
    d, h, k, r = dims.input_dim, dims.hidden_dim, dims.num_classes, dims.rank
    shapes = []
    for i in range(n_adapters):
        shapes += [(f"down{i}", (r, d)), (f"up{i}", (h, r))]
    for i in range(n_heads):
        shapes += [(f"head_w{i}", (k, h)), (f"head_b{i}", (k,))]
    return shapes


def _carve(flat: np.ndarray, shapes) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        out[name] = flat[pos:pos + size].reshape(shape)
        pos += size
    if pos != flat.size:
        raise ContractViolation(f"parameter vector has {flat.size} entries, layout needs {pos}")
    return out


def allocate_params(dims: ModelDims, n_adapters: int = 1, n_heads: int = 1):
    """Zeroed flat parameter vector plus named views for the given layout."""
    shapes = _layout(dims, n_adapters, n_heads)
    flat = np.zeros(sum(int(np.prod(s)) for _, s in shapes))
    return flat, _carve(flat, shapes)


class AdaptedClassifier:
    """``head(tanh((W + (alpha/r) B A) x + b))`` with W, b frozen."""

    def __init__(self, backbone: Backbone, adapter: LoraAdapter, head: Head, params: np.ndarray):
        self.backbone = backbone
        self.adapter = adapter
        self.head = head
        self.params = params
        if adapter.down.shape[1] != backbone.input_dim or adapter.up.shape[0] != backbone.hidden_dim:
            raise ContractViolation("adapter shape does not match backbone")
        if head.weight.shape[1] != backbone.hidden_dim:
            raise ContractViolation("head shape does not match backbone")

    @classmethod
    def create(cls, backbone: Backbone, dims: ModelDims, seed: int) -> "AdaptedClassifier":
        """Fresh model: Gaussian(0.02) down-projection, zero up-projection, zero head."""
        if (backbone.input_dim, backbone.hidden_dim) != (dims.input_dim, dims.hidden_dim):
            raise ContractViolation("backbone does not match dims")
        flat, views = allocate_params(dims)
        views["down0"][...] = stream(seed, "lora-down").normal(0.0, ADAPTER_INIT_STD, views["down0"].shape)
        return cls.from_views(backbone, views, dims.lora_alpha, flat)

    @classmethod
    def from_views(cls, backbone, views, alpha, flat, adapter_idx: int = 0, head_idx: int = 0):
        adapter = LoraAdapter(views[f"down{adapter_idx}"], views[f"up{adapter_idx}"], alpha)
        head = Head(views[f"head_w{head_idx}"], views[f"head_b{head_idx}"])
        return cls(backbone, adapter, head, flat)

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.backbone.input_dim, self.backbone.hidden_dim,
                         self.head.weight.shape[0], self.adapter.rank, self.adapter.alpha)

    @property
    def num_classes(self) -> int:
        return self.head.weight.shape[0]

    def effective_weight(self) -> np.ndarray:
        return self.backbone.weight + delta_weight(self.adapter)

    def logits(self, x) -> np.ndarray:
        X = _as_batch(x, self.backbone.input_dim)
        return kernels.forward(X, self.effective_weight(), self.backbone.bias,
                               self.head.weight, self.head.bias)

    def base_logits(self, x) -> np.ndarray:
        """Logits with the adapter removed (backbone + head only)."""
        X = _as_batch(x, self.backbone.input_dim)
        return kernels.forward(X, np.array(self.backbone.weight), self.backbone.bias,
                               self.head.weight, self.head.bias)

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict_classes(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def copy(self) -> "AdaptedClassifier":
        """Standalone copy with its own single-model parameter vector (also detaches a defense pair member)."""
        flat, views = allocate_params(self.dims)
        views["down0"][...] = self.adapter.down
        views["up0"][...] = self.adapter.up
        views["head_w0"][...] = self.head.weight
        views["head_b0"][...] = self.head.bias
        return AdaptedClassifier.from_views(self.backbone, views, self.adapter.alpha, flat)


def _as_batch(x, input_dim: int) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != input_dim:
        raise ContractViolation(f"expected inputs of length {input_dim}, got shape {np.shape(x)}")
    return np.ascontiguousarray(X)


def forward(model: AdaptedClassifier, x) -> np.ndarray:
    """Logits for one input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractViolation("forward takes a single input vector")
    return model.logits(x)[0]


def predict(model: AdaptedClassifier, x) -> tuple[int, float]:
    """``(argmax class, max probability)``; ties go to the lowest index."""
    p = softmax(forward(model, x))
    c = int(np.argmax(p))
    return c, float(p[c])


def predict_batch(model: AdaptedClassifier, X) -> tuple[np.ndarray, np.ndarray]:
    p = model.predict_proba(X)
    c = np.argmax(p, axis=1)
    return c, p[np.arange(len(c)), c]


# -- optimisation -----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    base_lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    mu: float = 0.9
    warmup_epochs: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractViolation("epochs must be >= 0")
        if not 0.0 <= self.mu <= 1.0:
            raise ContractViolation(f"mu must lie in [0, 1], got {self.mu}")
        if self.warmup_epochs < 0:
            raise ContractViolation("warmup_epochs must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ContractViolation(f"cosine_lr needs 0 <= step <= total_steps, got {step}/{total_steps}")
    return max(0.0, 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps)))


class Adam:
    def __init__(self, size: int, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    @classmethod
    def for_config(cls, size: int, cfg: TrainConfig) -> "Adam":
        return cls(size, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        kernels.adam_update(params, grad, self.m, self.v, self.t, lr, self.beta1, self.beta2, self.eps)


def loss_and_grad(model: AdaptedClassifier, X, Q) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``model.params``."""
    X = _as_batch(X, model.backbone.input_dim)
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    grad = np.zeros_like(model.params)
    loss = kernels.ce_loss_grad(X, Q, model.backbone.weight, model.backbone.bias,
                                model.params, model.adapter.rank, model.adapter.scale, grad)
    return float(loss), grad


def grad_step(model: AdaptedClassifier, X, Q, lr: float, optimizer: Adam | None = None) -> float:
    """One Adam step on the batch's mean cross-entropy; returns the pre-step loss."""
    if len(X) == 0:
        raise ContractViolation("grad_step needs a non-empty batch")
    if optimizer is None:
        optimizer = Adam(model.params.size)
    loss, grad = loss_and_grad(model, X, Q)
    optimizer.step(model.params, grad, lr)
    return loss


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    refinements: int = 0


def label_refine_train(model: AdaptedClassifier, store: SampleStore, cfg: TrainConfig,
                       history: TrainHistory | None = None) -> AdaptedClassifier:
    """Minibatch Adam on the soft-label cross-entropy with EMA label refinement.

    After every epoch beyond ``cfg.warmup_epochs`` each stored label moves
    toward the model's current prediction: ``q <- mu q + (1 - mu) softmax(z)``.
    The model is updated in place and returned.
    """
    n = len(store)
    if n == 0:
        raise ContractViolation("cannot train on an empty store")
    opt = Adam.for_config(model.params.size, cfg)
    X = np.ascontiguousarray(store.x)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.base_lr)
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        total, opt.t = kernels.train_epoch_ce(
            X, np.ascontiguousarray(store.q), order, cfg.batch_size,
            model.backbone.weight, model.backbone.bias, model.params,
            model.adapter.rank, model.adapter.scale,
            opt.m, opt.v, opt.t, lr, opt.beta1, opt.beta2, opt.eps)
        if history is not None:
            history.epoch_loss.append(total / n)
        if epoch + 1 > cfg.warmup_epochs and cfg.mu < 1.0:
            store.q = ema_update(store.q, model.predict_proba(X), cfg.mu)
            if history is not None:
                history.refinements += 1
    return model


# -- checkpoints --------------------------------------------------------------

def _matrix_record(a: np.ndarray):
    return np.asarray(a).tolist()


def model_to_dict(model: AdaptedClassifier) -> dict:
    dims = model.dims
    return {
        "dims": {"input_dim": dims.input_dim, "hidden_dim": dims.hidden_dim,
                 "num_classes": dims.num_classes, "rank": dims.rank, "alpha": model.adapter.alpha},
        "backbone": {"seed": model.backbone.seed,
                     "weight": _matrix_record(model.backbone.weight),
                     "bias": _matrix_record(model.backbone.bias)},
        "adapter": {"down": _matrix_record(model.adapter.down), "up": _matrix_record(model.adapter.up)},
        "head": {"weight": _matrix_record(model.head.weight), "bias": _matrix_record(model.head.bias)},
    }


def model_from_dict(rec: dict) -> AdaptedClassifier:
    d = rec["dims"]
    dims = ModelDims(d["input_dim"], d["hidden_dim"], d["num_classes"], d["rank"], d["alpha"])
    bb = rec["backbone"]
    backbone = Backbone(bb["weight"], bb["bias"], bb.get("seed"))
    flat, views = allocate_params(dims)
    views["down0"][...] = rec["adapter"]["down"]
    views["up0"][...] = rec["adapter"]["up"]
    views["head_w0"][...] = rec["head"]["weight"]
    views["head_b0"][...] = rec["head"]["bias"]
    return AdaptedClassifier.from_views(backbone, views, dims.lora_alpha, flat)


def dumps_checkpoint(models: dict[str, AdaptedClassifier], meta: dict | None = None) -> str:
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "meta": meta or {}, "models": {k: model_to_dict(m) for k, m in models.items()}}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, models: dict[str, AdaptedClassifier] | AdaptedClassifier,
                    meta: dict | None = None) -> Path:
    """Write one or more named models as JSON; floats round-trip exactly."""
    if isinstance(models, AdaptedClassifier):
        models = {"model": models}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_checkpoint(models, meta) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict[str, AdaptedClassifier], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractViolation(f"{path} is not a loralab checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {doc.get('version')}")
    return {k: model_from_dict(v) for k, v in doc["models"].items()}, doc.get("meta", {})
