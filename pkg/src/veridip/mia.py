"""Membership-inference primitives.

Scores follow one convention throughout: higher means "more likely a
member". The global attack scores a sample by its expected output
1 - loss/B; the per-sample attack scores by a Gaussian likelihood ratio of
the logit-scaled confidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, InsufficientShadowsError
from .nn import LOSS_CEILING, PROB_CLAMP

LOG_RATIO_CLAMP = 700.0


@dataclass(frozen=True)
class MiaConfig:
    loss_bound: float = LOSS_CEILING
    logit_clamp: float = PROB_CLAMP
    sigma_floor: float = 1e-6
    threshold: Optional[float] = None  # None -> calibrated

    def __post_init__(self):
        if not self.loss_bound > 0:
            raise DomainError("loss_bound must be > 0")
        if not 0 < self.logit_clamp < 0.5:
            raise DomainError("logit_clamp must lie in (0, 0.5)")
        if not self.sigma_floor > 0:
            raise DomainError("sigma_floor must be > 0")


@dataclass(frozen=True)
class GaussPair:
    mu_in: float
    sigma_in: float
    mu_out: float
    sigma_out: float
    n_in: int
    n_out: int


@dataclass(frozen=True)
class ScoreSet:
    member_scores: tuple
    nonmember_scores: tuple
    attack_tag: str = "global"

    @classmethod
    def of(cls, members, nonmembers, attack_tag="global") -> "ScoreSet":
        return cls(tuple(float(v) for v in members), tuple(float(v) for v in nonmembers), attack_tag)


def global_scores(losses, loss_bound: float = LOSS_CEILING) -> np.ndarray:
    if not loss_bound > 0:
        raise DomainError("loss_bound must be > 0")
    losses = np.asarray(losses, dtype=np.float64)
    return 1.0 - np.minimum(losses, loss_bound) / loss_bound


def global_score(oracle, features, label, loss_bound: float = LOSS_CEILING) -> float:
    loss = oracle.losses(np.atleast_2d(features), np.atleast_1d(label))[0]
    return float(global_scores([loss], loss_bound)[0])


def logit_confidences(losses, eps: float = PROB_CLAMP) -> np.ndarray:
    """ln(p / (1 - p)) with p = exp(-loss) clamped to [eps, 1 - eps]."""
    losses = np.asarray(losses, dtype=np.float64)
    lo, hi = -math.log1p(-eps), -math.log(eps)
    loss = np.clip(losses, lo, hi)
    # log(1 - p) = log(-expm1(-loss)) stays accurate as p -> 1
    return -loss - np.log(-np.expm1(-loss))


def logit_confidence(oracle, features, label, eps: float = PROB_CLAMP) -> float:
    loss = oracle.losses(np.atleast_2d(features), np.atleast_1d(label))[0]
    return float(logit_confidences([loss], eps)[0])


def fit_gauss_pair(in_obs, out_obs, sigma_floor: float = 1e-6) -> GaussPair:
    in_obs = np.asarray(in_obs, dtype=np.float64)
    out_obs = np.asarray(out_obs, dtype=np.float64)
    if len(in_obs) < 2 or len(out_obs) < 2:
        raise InsufficientShadowsError(
            f"need >= 2 observations per side, got in={len(in_obs)} out={len(out_obs)}"
        )
    return GaussPair(
        float(in_obs.mean()),
        max(float(in_obs.std(ddof=1)), sigma_floor),
        float(out_obs.mean()),
        max(float(out_obs.std(ddof=1)), sigma_floor),
        len(in_obs),
        len(out_obs),
    )


def _log_normal_pdf(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma)


def lira_log_ratio(phi, mu_in, sigma_in, mu_out, sigma_out) -> np.ndarray:
    """Vectorised log density ratio, clamped to +-700."""
    r = _log_normal_pdf(phi, mu_in, sigma_in) - _log_normal_pdf(phi, mu_out, sigma_out)
    return np.clip(r, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)


def lira_score(phi: float, pair: GaussPair) -> float:
    return float(np.exp(lira_log_ratio(phi, pair.mu_in, pair.sigma_in, pair.mu_out, pair.sigma_out)))


def _rates(members: np.ndarray, nonmembers: np.ndarray, t: float):
    return int((members > t).sum()), int((nonmembers > t).sum())


def calibrate_threshold(scores: ScoreSet):
    """Threshold maximising TPR - FPR over midpoints of the sorted unique scores.

    Returns ``(threshold, advantage)``; ties go to the smaller threshold.
    """
    m = np.asarray(scores.member_scores, dtype=np.float64)
    o = np.asarray(scores.nonmember_scores, dtype=np.float64)
    if len(m) == 0 or len(o) == 0:
        raise DomainError("calibration needs member and non-member scores")
    uniq = np.unique(np.concatenate([m, o]))
    if len(uniq) == 1:
        return float(uniq[0]), 0.0
    cands = (uniq[:-1] + uniq[1:]) / 2.0
    # counts strictly above each candidate, via sorted search
    tp = len(m) - np.searchsorted(np.sort(m), cands, side="right")
    fp = len(o) - np.searchsorted(np.sort(o), cands, side="right")
    # TPR - FPR scaled by |m| * |o| stays integral, so ties compare exactly
    adv = tp.astype(np.int64) * len(o) - fp.astype(np.int64) * len(m)
    i = int(np.argmax(adv))  # first maximum == smallest threshold
    return float(cands[i]), float(advantage(scores, float(cands[i])))


def advantage(scores: ScoreSet, threshold: Optional[float] = None) -> float:
    """TPR - FPR with "member" meaning score > threshold.

    With ``threshold=None`` returns the expectation form: mean member score
    minus mean non-member score. The thresholded form is computed in exact
    rationals and rounded once.
    """
    m = np.asarray(scores.member_scores, dtype=np.float64)
    o = np.asarray(scores.nonmember_scores, dtype=np.float64)
    if len(m) == 0 or len(o) == 0:
        raise DomainError("advantage needs nonempty member and non-member scores")
    if threshold is None:
        return float(m.mean() - o.mean())
    return float(advantage_exact(m, o, threshold))


def advantage_exact(member_scores, nonmember_scores, threshold: float) -> Fraction:
    """Thresholded TPR - FPR as an exact rational."""
    m = np.asarray(member_scores, dtype=np.float64)
    o = np.asarray(nonmember_scores, dtype=np.float64)
    if len(m) == 0 or len(o) == 0:
        raise DomainError("advantage needs nonempty member and non-member scores")
    tp, fp = _rates(m, o, threshold)
    return Fraction(tp, len(m)) - Fraction(fp, len(o))
