"""LoRA extraction attacks: random synthetic querying, disagreement-based
semi-supervised querying, and a random OOD-pool baseline.

All attacks talk to the victim only through ``oracle.query`` (and read
``oracle.remaining`` once up front), so a remote oracle can be dropped in.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import BudgetExhausted, ContractViolation
from .metrics import accuracy, asr
from .nnet import AdaptedClassifier, Backbone, ModelDims, TrainConfig, label_refine_train, predict_batch
from .rng import derive_seed, stream
from .store import PSEUDO, QUERIED, SampleStore, one_hot
from .worldgen import GeneratorConfig, PseudoLabeledSet, TaskWorld, balanced_counts, sample_ood, synth_candidates

IDENTICAL = "identical"
CROSS = "cross"
BACKBONE_MODES = (IDENTICAL, CROSS)
QUERY_CHUNK = 256
CHECKPOINT_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class SubstituteSpec:
    """What the attacker knows about the deployment: public backbone and adapter shape."""

    hidden_dim: int = 32
    rank: int = 4
    alpha: float | None = None
    public_backbone_seed: int = 1000

    def dims(self, world: TaskWorld) -> ModelDims:
        return ModelDims(world.input_dim, self.hidden_dim, world.num_classes, self.rank, self.alpha)


@dataclass(frozen=True)
class AttackConfig:
    backbone_mode: str = IDENTICAL
    budget: int = 2000
    iterations: int = 5
    beta: float = 1.5
    tau: float = 0.95
    initial_per_class: int = 10
    accumulate_training_set: bool = True
    warm_start: bool = True
    max_iterations: int | None = None
    train: TrainConfig = TrainConfig()
    substitute: SubstituteSpec = SubstituteSpec()
    seed: int = 0

    def __post_init__(self):
        if self.backbone_mode not in BACKBONE_MODES:
            raise ContractViolation(f"backbone_mode must be one of {BACKBONE_MODES}")
        if self.budget < 0 or self.iterations < 1:
            raise ContractViolation("need budget >= 0 and iterations >= 1")
        if self.beta < 1:
            raise ContractViolation("beta must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ContractViolation("tau must lie in (0, 1)")
        if self.initial_per_class < 1:
            raise ContractViolation("initial_per_class must be >= 1")

    @property
    def per_iteration_budget(self) -> int:
        return self.budget // self.iterations

    @property
    def iteration_cap(self) -> int:
        return self.max_iterations if self.max_iterations is not None else 3 * self.iterations

    def replace(self, **changes) -> "AttackConfig":
        return AttackConfig(**{**{f: getattr(self, f) for f in self.__dataclass_fields__}, **changes})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Evaluation:
    """Lab-side ground truth used only to score substitutes."""

    x: np.ndarray
    y: np.ndarray
    victim_acc: float

    def score(self, model) -> tuple[float, float]:
        acc = accuracy(model, self.x, self.y)
        return acc, asr(acc, self.victim_acc)


@dataclass
class RunReport:
    attack: str
    backbone_mode: str
    label_mode: str
    seed: int
    budget: int
    victim_acc: float | None
    checkpoints: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.checkpoints[-1]

    @property
    def queries_used(self) -> int:
        return self.final["queries_used"]

    @property
    def final_acc(self) -> float | None:
        return self.final["acc"]

    @property
    def final_asr(self) -> float | None:
        return self.final["asr"]

    def acc_at(self, fraction: float) -> float | None:
        """Accuracy of the last checkpoint that had used at most ``fraction * budget`` queries."""
        limit = fraction * self.budget + 1e-9
        eligible = [c for c in self.checkpoints if c["queries_used"] <= limit]
        return eligible[-1]["acc"] if eligible else None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def event_lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.events)

    def final_row(self) -> dict:
        return self.csv_rows()[-1]

    def csv_rows(self) -> list[dict]:
        return [{"attack": self.attack, "mode": self.backbone_mode, "seed": self.seed,
                 "budget": self.budget, "queries_used": c["queries_used"],
                 "acc": c["acc"], "asr": c["asr"]} for c in self.checkpoints]


class _Meter:
    """Counts answers actually received from the oracle, independent of attack bookkeeping."""

    def __init__(self, oracle, num_classes: int):
        self.oracle = oracle
        self.num_classes = num_classes
        self.answered = 0

    def query(self, x) -> np.ndarray:
        if len(x) == 0:
            return np.empty((0, self.num_classes))
        out = []
        for start in range(0, len(x), QUERY_CHUNK):
            out.append(np.asarray(self.oracle.query(x[start:start + QUERY_CHUNK]), dtype=np.float64))
            self.answered += len(out[-1])
        return np.concatenate(out)


def _label_mode(oracle) -> str:
    return getattr(oracle, "label_mode", "soft")


def _check_budget(oracle, budget: int) -> None:
    remaining = oracle.remaining
    if remaining < budget:
        raise BudgetExhausted(remaining, budget)


def make_substitute(dims: ModelDims, mode: str, seed: int, public_backbone_seed: int) -> AdaptedClassifier:
    """Fresh substitute on the victim's public backbone (identical) or an independent one (cross)."""
    if mode == IDENTICAL:
        bb_seed = public_backbone_seed
    elif mode == CROSS:
        bb_seed = derive_seed(seed, "cross-backbone")
        if bb_seed == public_backbone_seed:
            bb_seed += 1
    else:
        raise ContractViolation(f"unknown backbone mode {mode!r}")
    backbone = Backbone.from_seed(bb_seed, dims.input_dim, dims.hidden_dim)
    return AdaptedClassifier.create(backbone, dims, derive_seed(seed, "substitute-init"))


def _substitute_for(world: TaskWorld, cfg: AttackConfig) -> AdaptedClassifier:
    return make_substitute(cfg.substitute.dims(world), cfg.backbone_mode, cfg.seed,
                           cfg.substitute.public_backbone_seed)


def _score(model, evaluation: Evaluation | None) -> tuple[float | None, float | None]:
    if evaluation is None:
        return None, None
    return evaluation.score(model)


def _train_on_prefixes(world, cfg, x, answers, evaluation, report, tag) -> AdaptedClassifier:
    """Train a fresh substitute on growing prefixes of the answered queries (plain CE)."""
    n = len(x)
    sub = _substitute_for(world, cfg)
    if n == 0:
        acc, rate = _score(sub, evaluation)
        report.checkpoints.append({"queries_used": 0, "acc": acc, "asr": rate})
        return sub
    train_cfg = cfg.train.replace(mu=1.0, seed=derive_seed(cfg.seed, tag, "train"))
    for frac in CHECKPOINT_FRACTIONS:
        m = max(1, int(round(frac * n)))
        sub = _substitute_for(world, cfg)
        store = SampleStore.from_arrays(x[:m], answers[:m], QUERIED)
        label_refine_train(sub, store, train_cfg)
        acc, rate = _score(sub, evaluation)
        report.checkpoints.append({"queries_used": m, "acc": acc, "asr": rate})
    return sub


def stolen_lora_rand(oracle, world: TaskWorld, gen_cfg: GeneratorConfig, cfg: AttackConfig,
                     evaluation: Evaluation | None = None) -> tuple[AdaptedClassifier, RunReport]:
    """Query the victim on ``budget`` class-balanced synthetic samples and fit them with cross-entropy."""
    _check_budget(oracle, cfg.budget)
    report = RunReport("rand", cfg.backbone_mode, _label_mode(oracle), cfg.seed, cfg.budget,
                       evaluation.victim_acc if evaluation else None)
    rng = stream(cfg.seed, "rand-synth")
    cands = synth_candidates(world, gen_cfg, balanced_counts(world.num_classes, cfg.budget, rng), rng)
    x = cands.x[rng.permutation(len(cands))]
    answers = _Meter(oracle, world.num_classes).query(x)
    sub = _train_on_prefixes(world, cfg, x, answers, evaluation, report, "rand")
    return sub, report


def baseline_random_pool(oracle, world: TaskWorld, cfg: AttackConfig,
                         evaluation: Evaluation | None = None,
                         pool_sampler: Callable[[int, np.random.Generator], np.ndarray] | None = None,
                         ) -> tuple[AdaptedClassifier, RunReport]:
    """Query ``budget`` samples drawn from an unrelated pool (uniform OOD by default)."""
    _check_budget(oracle, cfg.budget)
    report = RunReport("baseline", cfg.backbone_mode, _label_mode(oracle), cfg.seed, cfg.budget,
                       evaluation.victim_acc if evaluation else None)
    if pool_sampler is None:
        def pool_sampler(n, rng):
            return sample_ood(world, n, rng)
    rng = stream(cfg.seed, "baseline-pool")
    x = pool_sampler(cfg.budget, rng) if cfg.budget else np.empty((0, world.input_dim))
    answers = _Meter(oracle, world.num_classes).query(x)
    sub = _train_on_prefixes(world, cfg, x, answers, evaluation, report, "baseline")
    return sub, report


@dataclass
class FilterResult:
    confident: np.ndarray  # candidate indices accepted with their pseudo-label
    uncertain: np.ndarray  # candidate indices left for querying
    predicted: np.ndarray
    confidence: np.ndarray


def disagreement_filter(model, candidates: PseudoLabeledSet, tau: float) -> FilterResult:
    """Accept a candidate iff the model predicts its pseudo-label with confidence >= tau."""
    if len(candidates) == 0:
        empty = np.empty(0, dtype=np.int64)
        return FilterResult(empty, empty, empty, np.empty(0))
    pred, conf = predict_batch(model, candidates.x)
    ok = (pred == candidates.pseudo_labels) & (conf >= tau)
    return FilterResult(np.flatnonzero(ok), np.flatnonzero(~ok), pred, conf)


def select_queries(confidences, b_t: int) -> np.ndarray:
    """Positions of the ``min(b_t, n)`` lowest confidences; ties keep generation order."""
    confidences = np.asarray(confidences, dtype=np.float64)
    order = np.argsort(confidences, kind="stable")
    return order[:max(0, min(int(b_t), confidences.size))]


def _iteration_budget(cfg: AttackConfig, t: int, spent: int) -> int:
    """Cumulative schedule floor(B/T) per iteration; the last scheduled one takes the remainder.

    Shortfalls roll forward because the target is cumulative.
    """
    target = cfg.per_iteration_budget * (t + 1) if t < cfg.iterations - 1 else cfg.budget
    return max(0, target - spent)


def stolen_lora_dsl(oracle, world: TaskWorld, gen_cfg: GeneratorConfig, cfg: AttackConfig,
                    evaluation: Evaluation | None = None) -> tuple[AdaptedClassifier, RunReport]:
    """Disagreement-based semi-supervised extraction.

    Iteration 0 trains on pseudo-labelled synthetic data only.  Each later
    iteration synthesises ceil(beta * b_t) candidates, keeps those the
    substitute already labels confidently as its pseudo-label, queries the
    least confident of the rest, and retrains with label refinement.
    """
    if 0 < cfg.budget < cfg.iterations:
        raise ContractViolation("DSL needs budget >= iterations (or a zero budget)")
    _check_budget(oracle, cfg.budget)
    meter = _Meter(oracle, world.num_classes)
    K = world.num_classes
    report = RunReport("dsl", cfg.backbone_mode, _label_mode(oracle), cfg.seed, cfg.budget,
                       evaluation.victim_acc if evaluation else None)
    rng = stream(cfg.seed, "dsl-synth")
    sub = _substitute_for(world, cfg)

    initial = synth_candidates(world, gen_cfg, np.full(K, cfg.initial_per_class), rng)
    store = SampleStore.from_arrays(initial.x, one_hot(initial.pseudo_labels, K), PSEUDO, 0)
    label_refine_train(sub, store, cfg.train.replace(seed=derive_seed(cfg.seed, "dsl-train", 0)))
    acc, rate = _score(sub, evaluation)
    report.checkpoints.append({"queries_used": 0, "acc": acc, "asr": rate})
    report.events.append({"iteration": 0, "candidates": len(initial), "confident": 0, "uncertain": 0,
                          "queried": 0, "queries_total": meter.answered, "remaining_budget": cfg.budget,
                          "train_size": len(store), "acc": acc, "asr": rate})

    spent, t = 0, 0
    while cfg.budget - spent >= 1 and t < cfg.iteration_cap:
        b_t = _iteration_budget(cfg, t, spent)
        t += 1
        cands = synth_candidates(world, gen_cfg, balanced_counts(K, math.ceil(cfg.beta * b_t), rng), rng)
        filt = disagreement_filter(sub, cands, cfg.tau)
        picked = filt.uncertain[select_queries(filt.confidence[filt.uncertain], b_t)]
        answers = meter.query(cands.x[picked])
        spent += len(picked)

        fresh = SampleStore(world.input_dim, K)
        fresh.add(cands.x[filt.confident], one_hot(cands.pseudo_labels[filt.confident], K), PSEUDO, t)
        fresh.add(cands.x[picked], answers, QUERIED, t)
        if cfg.accumulate_training_set:
            store.extend(fresh)
        else:
            store = fresh
        if not cfg.warm_start:
            sub = _substitute_for(world, cfg)
        if len(store):
            label_refine_train(sub, store, cfg.train.replace(seed=derive_seed(cfg.seed, "dsl-train", t)))
        acc, rate = _score(sub, evaluation)
        report.checkpoints.append({"queries_used": spent, "acc": acc, "asr": rate})
        report.events.append({
            "iteration": t, "iteration_budget": b_t, "candidates": len(cands),
            "confident": int(filt.confident.size), "uncertain": int(filt.uncertain.size),
            "queried": int(picked.size), "queries_total": meter.answered,
            "remaining_budget": cfg.budget - spent, "train_size": len(store), "acc": acc, "asr": rate,
            "tau": cfg.tau,
            "pseudo_labels": cands.pseudo_labels.tolist(),
            "predicted": filt.predicted.tolist(),
            "confidence": filt.confidence.tolist(),
            "confident_idx": filt.confident.tolist(),
            "uncertain_idx": filt.uncertain.tolist(),
            "queried_idx": picked.tolist(),
        })
    return sub, report


ATTACKS = {
    "dsl": lambda oracle, world, gen, cfg, ev: stolen_lora_dsl(oracle, world, gen, cfg, ev),
    "rand": lambda oracle, world, gen, cfg, ev: stolen_lora_rand(oracle, world, gen, cfg, ev),
    "baseline": lambda oracle, world, gen, cfg, ev: baseline_random_pool(oracle, world, cfg, ev),
}


def run_attack(name: str, oracle, world: TaskWorld, gen_cfg: GeneratorConfig, cfg: AttackConfig,
               evaluation: Evaluation | None = None) -> tuple[AdaptedClassifier, RunReport]:
    try:
        fn = ATTACKS[name]
    except KeyError:
        raise ContractViolation(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}") from None
    return fn(oracle, world, gen_cfg, cfg, evaluation)


def near_perfect_substitute(victim: AdaptedClassifier, x_train, cfg: AttackConfig,
                            mode: str = CROSS) -> AdaptedClassifier:
    """Substitute fitted to the victim's soft answers on the victim's own training inputs.

    This is the lab-side upper bound on extraction used by the distinction
    experiment; it reads the victim directly and spends no oracle budget.
    """
    dims = victim.dims
    sub = make_substitute(dims, mode, cfg.seed, cfg.substitute.public_backbone_seed)
    store = SampleStore.from_arrays(np.asarray(x_train, dtype=np.float64), victim.predict_proba(x_train), QUERIED)
    label_refine_train(sub, store, cfg.train.replace(mu=1.0, seed=derive_seed(cfg.seed, "distinction", "train")))
    return sub
