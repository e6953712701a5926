"""Dual-adapter divergence defense and the defender/attacker trade-off sweep.

Two LoRA adapters on the victim's backbone are trained jointly on the
victim's data with the objective

    CE(A) + CE(B) - lambda * mean KL(softmax_A || softmax_B)

and the deployment answers each query with one of the two at random.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .attacks import AttackConfig, Evaluation, RunReport, run_attack
from .errors import ContractViolation
from .metrics import accuracy, asr
from .nnet import AdaptedClassifier, TrainConfig, allocate_params, cosine_lr
from .numerics import cross_entropy, log_softmax
from .rng import derive_seed, stream
from .store import one_hot
from .victim import SOFT, VictimDataConfig, VictimOracle, train_victim, victim_backbone, victim_datasets
from .worldgen import GeneratorConfig, LabeledSet, TaskWorld

DEFAULT_LAMBDAS = (0.0, 0.5, 1.0, 2.0, 5.0)
TRADEOFF_COLUMNS = ("lambda", "attack", "seed", "defender_acc", "substitute_acc", "substitute_asr")


@dataclass(frozen=True)
class DefenseConfig:
    lam: float = 1.0
    shared_head: bool = True
    symmetric: bool = False
    same_init: bool = False
    record_logits: bool = False
    train: TrainConfig = TrainConfig()
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.lam) or self.lam < 0:
            raise ContractViolation(f"lambda must be finite and >= 0, got {self.lam}")

    def replace(self, **changes) -> "DefenseConfig":
        return DefenseConfig(**{**{f: getattr(self, f) for f in self.__dataclass_fields__}, **changes})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DualHistory:
    """End-of-epoch objective terms on the full training set, plus optional logits."""

    objective: list[float] = field(default_factory=list)
    ce_a: list[float] = field(default_factory=list)
    ce_b: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    logits_a: list[np.ndarray] = field(default_factory=list)
    logits_b: list[np.ndarray] = field(default_factory=list)


@dataclass
class DualLoraResult:
    model_a: AdaptedClassifier
    model_b: AdaptedClassifier
    acc_a: float
    acc_b: float
    heldout_kl: float
    history: DualHistory
    train_set: LabeledSet
    test_set: LabeledSet

    def oracle(self, budget: int, label_mode: str = SOFT, selection_seed: int = 0) -> VictimOracle:
        """Deployment that answers each query with adapter A or B by a fair coin."""
        return VictimOracle(self.model_a, budget, label_mode, secondary=self.model_b,
                            selection_seed=selection_seed)


def dual_objective(logits_a, logits_b, q, lam: float, symmetric: bool = False) -> tuple[float, ...]:
    """``(objective, ce_a, ce_b, kl)`` from logits, using the numerics primitives.

    KL is taken in log space rather than through ``kl_divergence``: a diverged
    pair drives probabilities far below that function's 1e-12 floor.
    """
    la, lb = log_softmax(logits_a), log_softmax(logits_b)
    ce_a = float(np.mean(cross_entropy(logits_a, q)))
    ce_b = float(np.mean(cross_entropy(logits_b, q)))
    kl = float(np.mean(np.sum(np.exp(la) * (la - lb), axis=-1)))
    if symmetric:
        kl += float(np.mean(np.sum(np.exp(lb) * (lb - la), axis=-1)))
    return ce_a + ce_b - lam * kl, ce_a, ce_b, kl


def init_dual_params(world: TaskWorld, cfg: DefenseConfig, data_cfg: VictimDataConfig):
    """Flat parameter vector for the pair; down-projections drawn per adapter unless ``same_init``."""
    dims = data_cfg.dims(world)
    flat, views = allocate_params(dims, 2, 1 if cfg.shared_head else 2)
    init_seed = derive_seed(cfg.seed, "dual-init")
    views["down0"][...] = stream(init_seed, "lora-down", "A").normal(0.0, 0.02, views["down0"].shape)
    if cfg.same_init:
        views["down1"][...] = views["down0"]
    else:
        views["down1"][...] = stream(init_seed, "lora-down", "B").normal(0.0, 0.02, views["down1"].shape)
    return dims, flat, views


def train_dual_lora(world: TaskWorld, cfg: DefenseConfig = DefenseConfig(),
                    data_cfg: VictimDataConfig = VictimDataConfig()) -> DualLoraResult:
    """Jointly train adapters A and B on the victim's data with the divergence objective."""
    train, test = victim_datasets(world, data_cfg)
    backbone = victim_backbone(world, data_cfg)
    dims, flat, views = init_dual_params(world, cfg, data_cfg)
    head_b = 0 if cfg.shared_head else 1
    model_a = AdaptedClassifier.from_views(backbone, views, dims.lora_alpha, flat, 0, 0)
    model_b = AdaptedClassifier.from_views(backbone, views, dims.lora_alpha, flat, 1, head_b)
    rank, scale = model_a.adapter.rank, model_a.adapter.scale
    W, b = backbone.weight, backbone.bias

    X = np.ascontiguousarray(train.x)
    Q = one_hot(train.y, world.num_classes)
    tc = cfg.train
    train_seed = derive_seed(cfg.seed, "dual-train", tc.seed)
    m, v, step = np.zeros_like(flat), np.zeros_like(flat), 0
    grad = np.zeros_like(flat)
    history = DualHistory()
    for epoch in range(tc.epochs):
        lr = cosine_lr(epoch, tc.epochs, tc.base_lr)
        order = stream(train_seed, "shuffle", epoch).permutation(len(X))
        _, step = kernels.train_epoch_dual(X, Q, order, tc.batch_size, W, b, flat, rank, scale,
                                           cfg.lam, cfg.symmetric, cfg.shared_head,
                                           m, v, step, lr, tc.beta1, tc.beta2, tc.eps)
        terms = kernels.dual_loss_grad(X, Q, W, b, flat, rank, scale, cfg.lam, cfg.symmetric,
                                       cfg.shared_head, grad)
        history.objective.append(float(terms[0]))
        history.ce_a.append(float(terms[1]))
        history.ce_b.append(float(terms[2]))
        history.kl.append(float(terms[3]))
        if cfg.record_logits:
            history.logits_a.append(model_a.logits(X))
            history.logits_b.append(model_b.logits(X))

    model_a, model_b = model_a.copy(), model_b.copy()
    heldout_kl = dual_objective(model_a.logits(test.x), model_b.logits(test.x),
                                one_hot(test.y, world.num_classes), 0.0)[3]
    return DualLoraResult(model_a, model_b, accuracy(model_a, test.x, test.y),
                          accuracy(model_b, test.x, test.y), heldout_kl, history, train, test)


def defender_accuracy(pair: DualLoraResult, selection_seed: int = 0) -> float:
    """Test accuracy of the randomized deployment, measured through its own oracle."""
    test = pair.test_set
    answers = pair.oracle(len(test), SOFT, selection_seed).query(test.x)
    return accuracy(lambda _x: np.argmax(answers, axis=1), test.x, test.y)


@dataclass
class TradeoffTable:
    rows: list[dict] = field(default_factory=list)
    reports: list[RunReport] = field(default_factory=list)
    pairs: dict[float, dict] = field(default_factory=dict)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=TRADEOFF_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in TRADEOFF_COLUMNS})
        return path

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]


def _attack_cfg(base: AttackConfig, budget: int, seed: int) -> AttackConfig:
    return base.replace(budget=budget, seed=seed)


def evaluate_tradeoff(world: TaskWorld, lambdas=DEFAULT_LAMBDAS, attacks=("dsl", "baseline"),
                      budget: int = 2000, seeds=(0, 1, 2, 3, 4),
                      gen_cfg: GeneratorConfig = GeneratorConfig(),
                      attack_cfg: AttackConfig = AttackConfig(),
                      defense_cfg: DefenseConfig = DefenseConfig(),
                      data_cfg: VictimDataConfig = VictimDataConfig(),
                      label_mode: str = SOFT, reference_acc: float | None = None) -> TradeoffTable:
    """One row per (lambda, attack, seed): defender accuracy and the attack's outcome.

    Substitute ASR is measured against ``reference_acc``, the accuracy of the
    undefended single-adapter victim (trained here when not given), so ASR
    drops across lambda are drops in substitute accuracy on a fixed scale.
    """
    if not lambdas or not attacks or not seeds:
        raise ContractViolation("lambda grid, attack list and seed list must be non-empty")
    if reference_acc is None:
        reference_acc = train_victim(world, data_cfg, defense_cfg.train)[1]
    table = TradeoffTable()
    for lam in lambdas:
        pair = train_dual_lora(world, defense_cfg.replace(lam=float(lam)), data_cfg)
        table.pairs[float(lam)] = {"acc_a": pair.acc_a, "acc_b": pair.acc_b, "heldout_kl": pair.heldout_kl}
        evaluation = Evaluation(pair.test_set.x, pair.test_set.y, reference_acc)
        for seed in seeds:
            selection_seed = derive_seed(seed, "selection")
            def_acc = defender_accuracy(pair, selection_seed)
            for name in attacks:
                oracle = pair.oracle(budget, label_mode, selection_seed)
                _, report = run_attack(name, oracle, world, gen_cfg, _attack_cfg(attack_cfg, budget, seed),
                                       evaluation)
                table.reports.append(report)
                table.rows.append({"lambda": float(lam), "attack": name, "seed": seed,
                                   "defender_acc": def_acc, "substitute_acc": report.final_acc,
                                   "substitute_asr": report.final_asr})
    return table


def undefended_reference(world: TaskWorld, attacks=("dsl", "baseline"), budget: int = 2000,
                         seeds=(0, 1, 2, 3, 4), gen_cfg: GeneratorConfig = GeneratorConfig(),
                         attack_cfg: AttackConfig = AttackConfig(),
                         data_cfg: VictimDataConfig = VictimDataConfig(),
                         train_cfg: TrainConfig = TrainConfig(), label_mode: str = SOFT) -> TradeoffTable:
    """Same rows against the plain single-adapter victim (lambda recorded as NaN)."""
    victim, victim_acc = train_victim(world, data_cfg, train_cfg)
    _, test = victim_datasets(world, data_cfg)
    evaluation = Evaluation(test.x, test.y, victim_acc)
    table = TradeoffTable()
    for seed in seeds:
        for name in attacks:
            oracle = VictimOracle(victim, budget, label_mode)
            _, report = run_attack(name, oracle, world, gen_cfg, _attack_cfg(attack_cfg, budget, seed), evaluation)
            table.reports.append(report)
            table.rows.append({"lambda": float("nan"), "attack": name, "seed": seed,
                               "defender_acc": victim_acc, "substitute_acc": report.final_acc,
                               "substitute_asr": report.final_asr})
    return table


def asr_drops(defended: TradeoffTable, reference: TradeoffTable, lam: float, attack: str) -> list[float]:
    """Per-seed ``reference ASR - defended ASR`` at one lambda, paired by seed."""
    ref = {r["seed"]: r["substitute_asr"] for r in reference.select(attack=attack)}
    return [ref[r["seed"]] - r["substitute_asr"] for r in defended.select(attack=attack, **{"lambda": lam})]
