"""Ownership testing: fingerprint estimation, the one-sided p-value, the
full verification run (basic and enhanced), minimal-exposure search and a
permutation-test cross-check.

Fingerprint orientation: mean member score minus mean non-member score,
with scores oriented so that larger means "more member-like".
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from . import mia, shadow
from .accountant import norm_sf
from .errors import ConfigError, DomainError, OracleError
from .nn import LOSS_CEILING, PROB_CLAMP

VARIANCE_FLOOR = 1e-12
_P_MIN = np.finfo(np.float64).tiny
_P_MAX = float(np.nextafter(1.0, 0.0))

ATTACK_KINDS = ("global", "per-sample")
MODES = ("basic", "enhanced")


@dataclass(frozen=True)
class AttackSpec:
    """Which membership signal to extract from the suspect.

    ``threshold`` is a log likelihood-ratio cut for the per-sample attack;
    ``None`` calibrates it on the shadow farm.
    """

    kind: str = "global"
    loss_bound: float = LOSS_CEILING
    logit_clamp: float = PROB_CLAMP
    sigma_floor: float = 1e-6
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack {self.kind!r}; expected one of {ATTACK_KINDS}")
        mia.MiaConfig(self.loss_bound, self.logit_clamp, self.sigma_floor)


@dataclass(frozen=True)
class Fingerprint:
    f_star: float
    sigma0: float
    sigma1: float
    n_s: int
    attack_tag: str = "global"


@dataclass(frozen=True)
class Verdict:
    p_value: float
    outcome: int
    alpha: float
    n_s: int
    fingerprint: Fingerprint
    mode: str
    exposed_sample_ids: tuple
    variance_floored: bool = False

    def to_dict(self) -> dict:
        return {
            "p_value": float(self.p_value),
            "outcome": self.outcome,
            "alpha": self.alpha,
            "n_s": self.n_s,
            "f_star": self.fingerprint.f_star,
            "sigma0": self.fingerprint.sigma0,
            "sigma1": self.fingerprint.sigma1,
            "mode": self.mode,
            "attack": self.fingerprint.attack_tag,
            "exposed_sample_ids": [int(i) for i in self.exposed_sample_ids],
            "variance_floored": self.variance_floored,
        }

    def to_json(self) -> str:
        return dumps_17(self.to_dict())


def dumps_17(obj) -> str:
    """JSON with floats written at 17 significant digits."""
    return "".join(_iter17(obj))


def _iter17(o):
    if isinstance(o, bool) or o is None:
        yield json.dumps(o)
    elif isinstance(o, float):
        yield f"{o:.17g}" if math.isfinite(o) else json.dumps(o)
    elif isinstance(o, int):
        yield str(o)
    elif isinstance(o, str):
        yield json.dumps(o)
    elif isinstance(o, dict):
        yield "{" + ", ".join(json.dumps(str(k)) + ": " + "".join(_iter17(v)) for k, v in o.items()) + "}"
    else:
        yield "[" + ", ".join("".join(_iter17(v)) for v in o) + "]"


# -- scoring ----------------------------------------------------------------


def _farm_for(attack: AttackSpec, farm):
    if attack.kind == "per-sample" and farm is None:
        raise ConfigError("the per-sample attack needs a shadow farm")
    return farm


def score_samples(oracle, rows: data_mod.Dataset, attack: AttackSpec, farm=None, farm_ids=None) -> np.ndarray:
    """Member-orientated attack scores for ``rows`` (one oracle query per row)."""
    losses = oracle.losses(rows.features, rows.labels)
    if attack.kind == "global":
        return mia.global_scores(losses, attack.loss_bound)
    farm = _farm_for(attack, farm)
    if farm_ids is None:
        raise ConfigError("per-sample scoring needs the rows' farm ids")
    phi = mia.logit_confidences(losses, attack.logit_clamp)
    mu_in, s_in, mu_out, s_out = farm.gauss_fits(farm_ids, attack.sigma_floor, attack.logit_clamp)
    log_ratio = mia.lira_log_ratio(phi, mu_in, s_in, mu_out, s_out)
    t = attack.threshold
    if t is None:
        t = shadow.calibrated_threshold(farm, attack.sigma_floor)[0]
    return (log_ratio > t).astype(np.float64)


def fingerprint_from_scores(member_scores, nonmember_scores, attack_tag: str = "global") -> Fingerprint:
    m = np.asarray(member_scores, dtype=np.float64)
    o = np.asarray(nonmember_scores, dtype=np.float64)
    if len(m) != len(o):
        raise DomainError(f"groups differ in size ({len(m)} vs {len(o)})")
    if len(m) < 2:
        raise DomainError("n_s must be >= 2 to estimate score deviations")
    return Fingerprint(float(m.mean() - o.mean()), float(m.std(ddof=1)), float(o.std(ddof=1)), len(m), attack_tag)


def estimate_fingerprint(oracle, d0, d1, attack: AttackSpec, farm=None, ids0=None, ids1=None) -> Fingerprint:
    """F* on member rows ``d0`` and non-member rows ``d1``.

    ``ids0``/``ids1`` are the rows' positions in the farm's base dataset
    (needed by the per-sample attack only).
    """
    if len(d0) != len(d1):
        raise DomainError("D0 and D1 must have equal size")
    if len(d0) < 2:
        raise DomainError("n_s must be >= 2")
    try:
        m = score_samples(oracle, d0, attack, farm, ids0)
    except OracleError as exc:
        raise type(exc)(f"scoring member samples {_ids_excerpt(ids0)}: {exc}") from exc
    try:
        o = score_samples(oracle, d1, attack, farm, ids1)
    except OracleError as exc:
        raise type(exc)(f"scoring non-member samples {_ids_excerpt(ids1)}: {exc}") from exc
    return fingerprint_from_scores(m, o, attack.kind)


def _ids_excerpt(ids) -> str:
    if ids is None:
        return ""
    ids = list(ids)
    return str(ids[:8])[:-1] + (", ...]" if len(ids) > 8 else "]")


def _z_stat(fp: Fingerprint):
    var = fp.sigma0**2 + fp.sigma1**2
    floored = var <= 0.0
    var = max(var, VARIANCE_FLOOR)
    return fp.f_star * math.sqrt(fp.n_s) / math.sqrt(var), floored


def p_value(fp: Fingerprint) -> float:
    """1 - Phi(F* sqrt(n_s) / sqrt(sigma0^2 + sigma1^2)), kept inside (0, 1)."""
    z, _ = _z_stat(fp)
    return float(min(max(norm_sf(z), _P_MIN), _P_MAX))


def variance_floored(fp: Fingerprint) -> bool:
    return _z_stat(fp)[1]


# -- ownership test ------------------------------------------------------------


def check_farm(farm, members: data_mod.Dataset, nonmembers: data_mod.Dataset) -> None:
    """The farm's base data must be the member pool followed by the non-member pool."""
    if farm.n_members is not None and farm.n_members != len(members):
        raise ConfigError(f"farm records {farm.n_members} members, pool has {len(members)}")
    base = farm.base_dataset
    n0 = len(members)
    if len(base) != n0 + len(nonmembers):
        raise ConfigError(
            f"farm covers {len(base)} samples, pools hold {n0} + {len(nonmembers)}"
        )
    if not (
        np.array_equal(base.features[:n0], members.features)
        and np.array_equal(base.labels[:n0], members.labels)
        and np.array_equal(base.features[n0:], nonmembers.features)
        and np.array_equal(base.labels[n0:], nonmembers.labels)
    ):
        raise ConfigError("farm base dataset does not match the member/non-member pools")


def less_private_ids(farm, n_members: int, k: int) -> list:
    """Top-k member ids by eta."""
    etas = [e for e in shadow.eta_scores(farm) if e.sample_id < n_members]
    return shadow.select_less_private(etas, k)


def ownership_test(
    oracle,
    members: data_mod.Dataset,
    nonmembers: data_mod.Dataset,
    n_s: int,
    alpha: float = 0.01,
    attack: AttackSpec = AttackSpec(),
    mode: str = "basic",
    farm=None,
    seed: int = 0,
    check_pools: bool = True,
) -> Verdict:
    """One run of the hypothesis test H0: F = 0 against Ha: F > 0.

    Enhanced mode replaces the random member draw with the ``n_s`` members of
    highest eta; non-members are always drawn at random.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    if (mode == "enhanced" or attack.kind == "per-sample") and farm is None:
        raise ConfigError(f"mode={mode} attack={attack.kind} needs a shadow farm")
    if farm is not None and check_pools:
        check_farm(farm, members, nonmembers)
    fixed = less_private_ids(farm, len(members), n_s) if mode == "enhanced" else None
    ids0, ids1 = data_mod.sample_ids(members, nonmembers, n_s, seed, fixed)
    fp = estimate_fingerprint(
        oracle,
        members.subset(ids0),
        nonmembers.subset(ids1),
        attack,
        farm,
        ids0,
        ids1 + len(members),
    )
    p = p_value(fp)
    return Verdict(p, int(p < alpha), alpha, n_s, fp, mode, tuple(int(i) for i in ids0), variance_floored(fp))


def _repeat_seed(seed: int, n: int, r: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(n), int(r)]).generate_state(1)[0])


def exposure_curve(oracle, members, nonmembers, alpha, attack, mode, farm, n_grid, repeats, seed=0):
    """Median p-value per grid size, stopping at the first median below alpha."""
    grid = list(n_grid)
    if not grid or any(n < 1 for n in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("n_grid must be ascending positive integers")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if farm is not None:
        check_farm(farm, members, nonmembers)
    curve = []
    for n in grid:
        ps = [
            ownership_test(oracle, members, nonmembers, n, alpha, attack, mode, farm,
                           _repeat_seed(seed, n, r), check_pools=False).p_value
            for r in range(repeats)
        ]
        med = float(np.median(ps))
        curve.append((n, med))
        if med < alpha:
            break
    return curve


def min_exposed_search(oracle, members, nonmembers, alpha, attack, mode, farm, n_grid, repeats, seed=0):
    """Smallest grid n_s whose median p-value is below alpha, else None."""
    curve = exposure_curve(oracle, members, nonmembers, alpha, attack, mode, farm, n_grid, repeats, seed)
    n, med = curve[-1]
    return n if med < alpha else None


def permutation_pvalue(member_scores, nonmember_scores, permutations: int = 10_000, seed: int = 0) -> float:
    """One-sided permutation test on the mean difference, (count + 1) / (B + 1)."""
    m = np.asarray(member_scores, dtype=np.float64)
    o = np.asarray(nonmember_scores, dtype=np.float64)
    if len(m) == 0 or len(o) == 0:
        raise DomainError("both score groups must be nonempty")
    if permutations < 1000:
        raise DomainError("use at least 1000 permutations")
    pooled = np.concatenate([m, o])
    observed = m.mean() - o.mean()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 4])))
    count, done = 0, 0
    tol = 1e-12 * max(1.0, float(np.abs(pooled).max()))
    while done < permutations:
        b = min(2000, permutations - done)
        perm = rng.permuted(np.tile(pooled, (b, 1)), axis=1)
        diff = perm[:, : len(m)].mean(axis=1) - perm[:, len(m) :].mean(axis=1)
        count += int((diff >= observed - tol).sum())
        done += b
    return (count + 1) / (permutations + 1)
