"""Model-stealing attacks that produce suspect copies of a victim:
extraction from soft predictions (ME), knowledge distillation (KD) and
large-then-decaying-lr fine-tuning (FT)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .data import Dataset
from .errors import ConfigError, OracleError

ATTACKS = ("me", "kd", "ft")


@dataclass(frozen=True)
class StealConfig:
    attack: str = "me"
    hard_weight: float = 0.5  # lambda_1
    soft_weight: float = 0.5  # lambda_2
    temperature: float = 1.5
    epochs: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    ft_lr_schedule: tuple = ((1, 0.1), (10, 0.01), (20, 0.001))
    attacker_fraction: float = 0.4

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}")
        if self.hard_weight < 0 or self.soft_weight < 0:
            raise ConfigError("KD weights must be non-negative")
        if self.attack == "kd" and self.hard_weight + self.soft_weight <= 0:
            raise ConfigError("KD needs hard_weight + soft_weight > 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if not 0 < self.attacker_fraction <= 1:
            raise ConfigError("attacker_fraction must lie in (0, 1]")
        lrs = [lr for _, lr in self.ft_lr_schedule]
        if any(b >= a for a, b in zip(lrs, lrs[1:])):
            raise ConfigError("ft_lr_schedule learning rates must be strictly decreasing")

    def train_config(self, **overrides) -> nn.TrainConfig:
        kw = dict(
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
        )
        kw.update(overrides)
        return nn.TrainConfig(**kw)


def attacker_subset(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """The share of the victim's training data an attacker holds."""
    n = max(1, int(round(fraction * len(dataset))))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 3])))
    return dataset.subset(np.sort(rng.choice(len(dataset), size=n, replace=False)))


def _query(oracle, features: np.ndarray) -> np.ndarray:
    try:
        return oracle.predict_proba(features)
    except OracleError as exc:
        raise type(exc)(f"victim query over {len(features)} rows (indices 0..{len(features) - 1}) failed: {exc}") from exc


def steal_me(oracle, query_features, config: StealConfig, student_dims) -> nn.MlpModel:
    """Fresh student trained on the victim's probability outputs only."""
    if config.attack != "me":
        raise ConfigError("steal_me needs attack='me'")
    x = np.asarray(query_features, dtype=np.float64)
    if len(x) == 0:
        raise ConfigError("query set is empty")
    teacher = _query(oracle, x)
    # labels are a placeholder for the training history only; the objective
    # has zero weight on them
    queries = Dataset(x, teacher.argmax(axis=1))
    student = nn.mlp_init(student_dims, seed=config.seed)
    spec = nn.DistillSpec(teacher, hard_weight=0.0, soft_weight=1.0, temperature=1.0)
    return nn.train(student, queries, config.train_config(), distill=spec)[0]


def steal_kd(oracle, labeled: Dataset, config: StealConfig, student_dims) -> nn.MlpModel:
    if config.attack != "kd":
        raise ConfigError("steal_kd needs attack='kd'")
    teacher = _query(oracle, labeled.features)
    student = nn.mlp_init(student_dims, seed=config.seed)
    spec = nn.DistillSpec(teacher, config.hard_weight, config.soft_weight, config.temperature)
    return nn.train(student, labeled, config.train_config(), distill=spec)[0]


def steal_ft(victim: nn.MlpModel, labeled: Dataset, config: StealConfig) -> nn.MlpModel:
    """White-box continuation of training on ground-truth labels.

    ``ft_lr_schedule`` holds (1-based epoch, absolute SGD lr) pairs; epochs
    before the first entry use the first rate.
    """
    if config.attack != "ft":
        raise ConfigError("steal_ft needs attack='ft'")
    if not config.ft_lr_schedule:
        raise ConfigError("ft_lr_schedule is empty")
    schedule = list(config.ft_lr_schedule)
    schedule[0] = (1, schedule[0][1])
    cfg = config.train_config(optimizer="sgd", learning_rate=1.0, lr_schedule=tuple(schedule))
    return nn.train(victim, labeled, cfg)[0]


def steal(attack: str, victim_oracle, labeled: Dataset, config: StealConfig, student_dims=None,
          victim_model: Optional[nn.MlpModel] = None) -> nn.MlpModel:
    if attack == "me":
        return steal_me(victim_oracle, labeled.features, config, student_dims)
    if attack == "kd":
        return steal_kd(victim_oracle, labeled, config, student_dims)
    if victim_model is None:
        raise ConfigError("fine-tuning needs white-box access to the victim model")
    return steal_ft(victim_model, labeled, config)
