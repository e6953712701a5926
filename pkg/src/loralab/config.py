"""Experiment configuration: one JSON document where every key is optional.

An empty object ``{}`` runs the canonical desk-scale experiment.  Unknown
keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .attacks import ATTACKS, BACKBONE_MODES, AttackConfig
from .defense import DEFAULT_LAMBDAS, DefenseConfig
from .errors import ContractViolation
from .nnet import TrainConfig
from .victim import LABEL_MODES, SOFT, VictimDataConfig
from .worldgen import GeneratorConfig, TaskWorld


@dataclass(frozen=True)
class DefenseSweep:
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    attacks: tuple[str, ...] = ("dsl", "baseline")
    budget: int = 2000
    shared_head: bool = True
    symmetric: bool = False
    same_init: bool = False
    seed: int = 0


@dataclass(frozen=True)
class DistinctionConfig:
    ood_samples: int = 1600


@dataclass(frozen=True)
class ServeConfig:
    address: str = "127.0.0.1:8765"
    budget: int = 2000
    defense_lambda: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    world: TaskWorld = TaskWorld()
    generator: GeneratorConfig = GeneratorConfig()
    victim: VictimDataConfig = VictimDataConfig()
    victim_checkpoint: str | None = None
    train: TrainConfig = TrainConfig()
    attack: AttackConfig = AttackConfig()
    attacks: tuple[str, ...] = ("dsl", "rand", "baseline")
    budgets: tuple[int, ...] = (2000,)
    label_mode: str = SOFT
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    defense: DefenseSweep = DefenseSweep()
    distinction: DistinctionConfig = DistinctionConfig()
    serve: ServeConfig = ServeConfig()
    out: str = "out"
    parallel: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ContractViolation("seed list must be non-empty")
        if not self.budgets:
            raise ContractViolation("budget list must be non-empty")
        if not self.attacks:
            raise ContractViolation("attack list must be non-empty")
        for name in tuple(self.attacks) + tuple(self.defense.attacks):
            if name not in ATTACKS:
                raise ContractViolation(f"unknown attack {name!r}; choose from {sorted(ATTACKS)}")
        if not self.defense.lambdas:
            raise ContractViolation("defense lambda grid must be non-empty")
        if self.label_mode not in LABEL_MODES:
            raise ContractViolation(f"label_mode must be one of {LABEL_MODES}")
        if self.attack.backbone_mode not in BACKBONE_MODES:
            raise ContractViolation(f"backbone_mode must be one of {BACKBONE_MODES}")
        if self.parallel < 1:
            raise ContractViolation("parallel must be >= 1")
        if self.attack.train != TrainConfig():
            raise ContractViolation("set training options under the top-level 'train' key, not 'attack.train'")
        if not self.name or "/" in self.name:
            raise ContractViolation("name must be a non-empty path component")

    def attack_config(self, budget: int, seed: int) -> AttackConfig:
        """Per-cell attack config; validates the budget against the schedule."""
        cfg = self.attack.replace(budget=int(budget), seed=int(seed), train=self.train)
        if "dsl" in self.attacks and 0 < cfg.budget < cfg.iterations:
            raise ContractViolation(f"budget {budget} is below the {cfg.iterations} DSL iterations")
        return cfg

    def defense_config(self, lam: float) -> DefenseConfig:
        d = self.defense
        return DefenseConfig(lam=float(lam), shared_head=d.shared_head, symmetric=d.symmetric,
                             same_init=d.same_init, train=self.train, seed=d.seed)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **changes})

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data, where: str):
    """Instantiate a (possibly nested) frozen dataclass from a JSON object."""
    if not isinstance(data, dict):
        raise ContractViolation(f"{where} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ContractViolation(f"unknown key(s) in {where}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        if hasattr(current, "__dataclass_fields__"):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ContractViolation(f"{where}.{name} must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ContractViolation(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ContractViolation("config must be a JSON object")
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ContractViolation(f"config file not found: {path}") from None
    except OSError as exc:
        raise ContractViolation(f"cannot read config file {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


__all__ = ["ExperimentConfig", "DefenseSweep", "DistinctionConfig", "ServeConfig",
           "config_from_dict", "load_config"]
