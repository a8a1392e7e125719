"""Desk-scale steal-and-verify scenario: an overfit victim MLP on synthetic
data, its ME/KD/FT copies, independently trained models and the shadow
farms the per-sample attack and the enhanced mode need."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import data as data_mod
from . import nn, shadow, steal
from .oracle import LocalOracle


def derive_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1)[0])


@dataclass(frozen=True)
class BenchmarkConfig:
    n_features: int = 48
    n_classes: int = 2
    separation: float = 2.5
    label_noise: float = 0.25
    hidden: tuple = (64, 64)
    activation: str = "relu"
    n_members: int = 200
    n_nonmembers: int = 200
    n_test: int = 1000
    n_independent: int = 10
    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 32
    farm_models: int = 32
    eta_farm_models: int = shadow.DEFAULT_MODELS
    attacker_fraction: float = 0.4
    seed: int = 0

    @property
    def layer_dims(self) -> tuple:
        return (self.n_features, *self.hidden, self.n_classes)

    def train_config(self, seed: int) -> nn.TrainConfig:
        return nn.TrainConfig("adam", self.learning_rate, self.epochs, self.batch_size, seed=seed)


@dataclass(eq=False)
class Benchmark:
    """Lazily built scenario; every piece is a pure function of the config."""

    config: BenchmarkConfig = field(default_factory=BenchmarkConfig)

    @cached_property
    def _pool(self) -> data_mod.Dataset:
        c = self.config
        n = c.n_members + c.n_nonmembers + c.n_test + c.n_independent * c.n_members
        return data_mod.gen_synthetic(
            n, c.n_features, c.n_classes, c.separation, c.label_noise, seed=derive_seed(c.seed, 1)
        )

    def _rows(self, start: int, count: int) -> data_mod.Dataset:
        return self._pool.subset(np.arange(start, start + count))

    @property
    def members(self) -> data_mod.Dataset:
        return self._rows(0, self.config.n_members)

    @property
    def nonmembers(self) -> data_mod.Dataset:
        return self._rows(self.config.n_members, self.config.n_nonmembers)

    @property
    def test(self) -> data_mod.Dataset:
        c = self.config
        return self._rows(c.n_members + c.n_nonmembers, c.n_test)

    def independent_data(self, i: int) -> data_mod.Dataset:
        c = self.config
        return self._rows(c.n_members + c.n_nonmembers + c.n_test + i * c.n_members, c.n_members)

    def _fit(self, dataset, seed: int) -> nn.MlpModel:
        c = self.config
        model = nn.mlp_init(c.layer_dims, c.activation, seed)
        return nn.train(model, dataset, c.train_config(seed))[0]

    @cached_property
    def victim(self) -> nn.MlpModel:
        return self._fit(self.members, derive_seed(self.config.seed, 2))

    @cached_property
    def attacker_data(self) -> data_mod.Dataset:
        c = self.config
        return steal.attacker_subset(self.members, c.attacker_fraction, derive_seed(c.seed, 3))

    def steal_config(self, attack: str) -> steal.StealConfig:
        c = self.config
        return steal.StealConfig(
            attack, epochs=c.epochs, learning_rate=c.learning_rate, batch_size=c.batch_size,
            seed=derive_seed(c.seed, 4), attacker_fraction=c.attacker_fraction,
        )

    @cached_property
    def copies(self) -> dict:
        oracle = LocalOracle(self.victim)
        return {
            attack: steal.steal(attack, oracle, self.attacker_data, self.steal_config(attack),
                                self.config.layer_dims, self.victim)
            for attack in steal.ATTACKS
        }

    @cached_property
    def independents(self) -> list:
        c = self.config
        return [self._fit(self.independent_data(i), derive_seed(c.seed, 5, i)) for i in range(c.n_independent)]

    @property
    def farm_base(self) -> data_mod.Dataset:
        return data_mod.concat(self.members, self.nonmembers)

    def _farm(self, n_models: int, stream: int) -> shadow.ShadowFarm:
        c = self.config
        return shadow.build_farm(
            self.farm_base, n_models, c.train_config(0), c.layer_dims, c.activation,
            seed=derive_seed(c.seed, stream), n_members=c.n_members,
        )

    @cached_property
    def farm(self) -> shadow.ShadowFarm:
        return self._farm(self.config.farm_models, 6)

    @cached_property
    def eta_farm(self) -> shadow.ShadowFarm:
        return self._farm(self.config.eta_farm_models, 7)

    def accuracy(self, model: nn.MlpModel, dataset=None) -> float:
        ds = self.test if dataset is None else dataset
        return float((nn.forward_proba(model, ds.features).argmax(axis=1) == ds.labels).mean())
