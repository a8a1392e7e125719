"""Shadow-model farm: N models trained on random half-subsets of a base
dataset, with the per-sample in/out statistics both the per-sample attack
and the less-private-sample search consume."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from . import mia, nn
from .errors import CoverageError, DomainError

LOSS_FLOOR = 1e-8
MIN_MODELS = 8
DEFAULT_MODELS = 100


@dataclass(frozen=True)
class EtaScore:
    sample_id: int
    eta: float
    mean_loss_in: float
    mean_loss_out: float


@dataclass(eq=False)
class ShadowFarm:
    models: list
    membership_mask: np.ndarray  # (N, n) bool
    base_dataset: data_mod.Dataset
    train_config: nn.TrainConfig
    layer_dims: tuple
    activation: str
    seed: int
    n_members: Optional[int] = None  # rows [0, n_members) are the owner's members
    losses: np.ndarray = field(default=None, repr=False)  # (N, n)
    _calibration: dict = field(default_factory=dict, repr=False)  # derived-value cache

    def __post_init__(self):
        if self.losses is None:
            x, y = self.base_dataset.features, self.base_dataset.labels
            self.losses = np.vstack([nn.ce_loss(nn.forward_proba(m, x), y) for m in self.models])

    @property
    def n_models(self) -> int:
        return len(self.models)

    @property
    def n_samples(self) -> int:
        return len(self.base_dataset)

    def confidences(self, eps: float = nn.PROB_CLAMP) -> np.ndarray:
        key = ("conf", eps)
        if key not in self._calibration:
            self._calibration[key] = mia.logit_confidences(self.losses, eps)
        return self._calibration[key]

    def gauss_fits(self, ids=None, sigma_floor: float = 1e-6, eps: float = nn.PROB_CLAMP):
        """Per-sample (mu_in, sigma_in, mu_out, sigma_out) arrays over shadow confidences."""
        ids = np.arange(self.n_samples) if ids is None else np.asarray(ids)
        conf = self.confidences(eps)[:, ids]
        mask = self.membership_mask[:, ids]
        return _masked_fits(conf, mask, sigma_floor)

    def pair(self, sample_id: int, sigma_floor: float = 1e-6) -> mia.GaussPair:
        conf = self.confidences()[:, sample_id]
        mask = self.membership_mask[:, sample_id]
        return mia.fit_gauss_pair(conf[mask], conf[~mask], sigma_floor)


def _masked_fits(conf: np.ndarray, mask: np.ndarray, sigma_floor: float):
    def stats(sel):
        cnt = sel.sum(axis=0)
        mean = np.where(sel, conf, 0.0).sum(axis=0) / cnt
        var = np.where(sel, (conf - mean) ** 2, 0.0).sum(axis=0) / (cnt - 1)
        return mean, np.maximum(np.sqrt(var), sigma_floor)

    mu_in, s_in = stats(mask)
    mu_out, s_out = stats(~mask)
    return mu_in, s_in, mu_out, s_out


def _check_coverage(mask: np.ndarray) -> None:
    in_cnt = mask.sum(axis=0)
    out_cnt = mask.shape[0] - in_cnt
    bad = np.flatnonzero((in_cnt < 2) | (out_cnt < 2))
    if len(bad):
        raise CoverageError(
            f"{len(bad)} samples (e.g. id {bad[0]}) have fewer than 2 in- or out-models; use a larger N"
        )


def half_masks(n_models: int, n: int, seed: int) -> np.ndarray:
    """Membership rows in complementary pairs: model 2p trains on a random
    half, model 2p+1 on the rest, so every sample is "in" for N/2 models
    (N odd: the last model takes an unpaired random half)."""
    mask = np.zeros((n_models, n), dtype=bool)
    for i in range(0, n_models, 2):
        perm = nn.run_rng(seed, i // 2, 2).permutation(n)
        mask[i, perm[: n // 2]] = True
        if i + 1 < n_models:
            mask[i + 1] = ~mask[i]
    return mask


def build_farm(
    dataset: data_mod.Dataset,
    n_models: int,
    config: nn.TrainConfig,
    layer_dims,
    activation: str = "relu",
    seed: int = 0,
    n_members: Optional[int] = None,
    workers: int = 1,
) -> ShadowFarm:
    """Train ``n_models`` shadows on random halves of ``dataset`` (see :func:`half_masks`).

    Shadow i uses init seed and shuffle seed derived from (seed, i); results are
    assembled in index order, so ``workers`` never changes the outcome.
    """
    if n_models < MIN_MODELS:
        raise DomainError(f"need at least {MIN_MODELS} shadow models, got {n_models}")
    mask = half_masks(n_models, len(dataset), seed)
    _check_coverage(mask)

    def fit(i: int) -> nn.MlpModel:
        sub_seed = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        model = nn.mlp_init(layer_dims, activation, sub_seed)
        cfg = dataclasses.replace(config, seed=sub_seed)
        return nn.train(model, dataset.subset(np.flatnonzero(mask[i])), cfg)[0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            models = list(pool.map(fit, range(n_models)))
    else:
        models = [fit(i) for i in range(n_models)]
    return ShadowFarm(models, mask, dataset, config, tuple(layer_dims), activation, int(seed), n_members)


def eta_scores(farm: ShadowFarm) -> list:
    """Out-model mean loss over in-model mean loss per sample, descending."""
    mask = farm.membership_mask
    _check_coverage(mask)
    loss_in = np.where(mask, farm.losses, 0.0).sum(axis=0) / mask.sum(axis=0)
    loss_out = np.where(~mask, farm.losses, 0.0).sum(axis=0) / (~mask).sum(axis=0)
    eta = loss_out / np.maximum(loss_in, LOSS_FLOOR)
    order = np.lexsort((np.arange(len(eta)), -eta))
    return [EtaScore(int(j), float(eta[j]), float(loss_in[j]), float(loss_out[j])) for j in order]


def select_less_private(etas, k: int) -> list:
    if k < 0 or k > len(etas):
        raise DomainError(f"k={k} outside [0, {len(etas)}]")
    ranked = sorted(etas, key=lambda e: (-e.eta, e.sample_id))
    return [e.sample_id for e in ranked[:k]]


def eta_csv(etas) -> str:
    lines = ["sample_id,eta,mean_loss_in,mean_loss_out"]
    lines += [f"{e.sample_id},{e.eta:.17g},{e.mean_loss_in:.17g},{e.mean_loss_out:.17g}" for e in etas]
    return "\n".join(lines) + "\n"


# -- the calibrated per-sample threshold -------------------------------------


def loo_log_ratios(farm: ShadowFarm, sigma_floor: float = 1e-6, eps: float = nn.PROB_CLAMP):
    """Leave-one-model-out per-sample scores of every shadow on every sample.

    Returns (log_ratios, is_member, valid), all shaped (N, n). An entry is
    invalid when removing its model leaves fewer than 2 observations.
    """
    conf = farm.confidences(eps)
    mask = farm.membership_mask
    n_in = mask.sum(axis=0)
    n_out = mask.shape[0] - n_in

    def loo(sel, cnt):
        s1 = np.where(sel, conf, 0.0).sum(axis=0)
        s2 = np.where(sel, conf * conf, 0.0).sum(axis=0)
        # drop the scored model's own observation where it belongs to this side
        c = cnt - sel
        m = (s1 - np.where(sel, conf, 0.0)) / np.maximum(c, 1)
        ss = s2 - np.where(sel, conf * conf, 0.0) - c * m * m
        var = np.maximum(ss, 0.0) / np.maximum(c - 1, 1)
        return m, np.maximum(np.sqrt(var), sigma_floor), c

    mu_in, s_in, c_in = loo(mask, n_in)
    mu_out, s_out, c_out = loo(~mask, n_out)
    valid = (c_in >= 2) & (c_out >= 2)
    return mia.lira_log_ratio(conf, mu_in, s_in, mu_out, s_out), mask, valid


def calibrated_threshold(farm: ShadowFarm, sigma_floor: float = 1e-6) -> tuple:
    """(log-ratio threshold, shadow advantage), cached on the farm."""
    key = ("lira", sigma_floor)
    if key not in farm._calibration:
        r, mask, valid = loo_log_ratios(farm, sigma_floor)
        scores = mia.ScoreSet.of(r[mask & valid], r[~mask & valid], "per_sample")
        farm._calibration[key] = mia.calibrate_threshold(scores)
    return farm._calibration[key]


# -- persistence --------------------------------------------------------------


def _config_hash(config: nn.TrainConfig, layer_dims, activation) -> str:
    blob = json.dumps(
        {"train": dataclasses.asdict(config), "layer_dims": list(layer_dims), "activation": activation},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _mask_hex(mask: np.ndarray) -> str:
    return np.packbits(mask.reshape(-1).astype(np.uint8)).tobytes().hex()


def save_farm(farm: ShadowFarm, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "n_models": farm.n_models,
        "n_samples": farm.n_samples,
        "seed": farm.seed,
        "config_hash": _config_hash(farm.train_config, farm.layer_dims, farm.activation),
        "mask_hex": _mask_hex(farm.membership_mask),
        "train_config": dataclasses.asdict(farm.train_config),
        "layer_dims": list(farm.layer_dims),
        "activation": farm.activation,
        "n_members": farm.n_members,
        "models": [f"shadow_{i:04d}.vdip" for i in range(farm.n_models)],
        "data": "base.csv",
    }
    for name, model in zip(manifest["models"], farm.models):
        nn.save_model(model, d / name)
    data_mod.save_csv(farm.base_dataset, d / "base.csv")
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_farm(directory) -> ShadowFarm:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = dict(manifest["train_config"])
    if cfg.get("lr_schedule") is not None:
        cfg["lr_schedule"] = tuple(tuple(p) for p in cfg["lr_schedule"])
    config = nn.TrainConfig(**cfg)
    if _config_hash(config, manifest["layer_dims"], manifest["activation"]) != manifest["config_hash"]:
        raise DomainError("farm manifest config hash does not match its config")
    n, N = manifest["n_samples"], manifest["n_models"]
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(manifest["mask_hex"]), dtype=np.uint8))[: N * n]
    mask = bits.reshape(N, n).astype(bool)
    models = [nn.load_model(d / name) for name in manifest["models"]]
    base = data_mod.load_csv(d / manifest["data"])
    return ShadowFarm(
        models, mask, base, config, tuple(manifest["layer_dims"]), manifest["activation"],
        manifest["seed"], manifest["n_members"],
    )
