"""Renyi-DP accounting for the subsampled Gaussian mechanism and the
DP-induced floor on ownership-test p-values."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import DomainError

DEFAULT_ORDERS = tuple(range(2, 65))


@dataclass(frozen=True)
class RdpProfile:
    orders: tuple
    rdp_values: tuple
    steps: int
    q: float
    z: float


@dataclass(frozen=True)
class DpBoundPoint:
    epsilon: float
    n_s: int
    sigma_sq_sum: float
    min_p: float


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def norm_sf(x: float) -> float:
    """1 - Phi(x) without cancellation in the upper tail."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def _log_a_int(q: float, z: float, alpha: int) -> float:
    # log sum_k C(alpha,k) (1-q)^(alpha-k) q^k exp((k^2 - k) / (2 z^2))
    k = np.arange(alpha + 1, dtype=np.float64)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    terms = log_binom + k * math.log(q) + (alpha - k) * math.log1p(-q) + (k * k - k) / (2 * z * z)
    return float(logsumexp(terms))


def rdp_subsampled_gaussian(q: float, z: float, steps: int, orders: Optional[Sequence[float]] = None) -> RdpProfile:
    """RDP of ``steps`` compositions of the Poisson-subsampled Gaussian mechanism.

    q == 1 uses the closed form alpha / (2 z^2); otherwise integer orders only.
    """
    orders = tuple(DEFAULT_ORDERS if orders is None else orders)
    if not 0 < q <= 1:
        raise DomainError(f"sampling rate must lie in (0, 1], got {q}")
    if not z > 0:
        raise DomainError(f"noise multiplier must be > 0, got {z}")
    if steps < 1:
        raise DomainError("steps must be >= 1")
    values = []
    for a in orders:
        if not a > 1:
            raise DomainError(f"RDP order must be > 1, got {a}")
        if q == 1.0:
            values.append(steps * a / (2.0 * z * z))
            continue
        if int(a) != a:
            raise DomainError(f"subsampled accounting supports integer orders only, got {a}")
        per_step = _log_a_int(q, z, int(a)) / (a - 1)
        values.append(steps * max(per_step, 0.0))
    return RdpProfile(orders, tuple(values), int(steps), float(q), float(z))


def rdp_to_epsilon(profile: RdpProfile, delta: float):
    """(epsilon, best_order) with epsilon = min_a rdp(a) + ln(1/delta) / (a - 1)."""
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if not profile.orders:
        raise DomainError("empty RDP profile")
    log_inv = math.log(1.0 / delta)
    eps = [r + log_inv / (a - 1) for a, r in zip(profile.orders, profile.rdp_values)]
    i = int(np.argmin(eps))
    return float(eps[i]), profile.orders[i]


def epsilon_for_training(n: int, batch_size: int, epochs: int, z: float, delta: float, orders=None) -> float:
    steps = epochs * math.ceil(n / batch_size)
    profile = rdp_subsampled_gaussian(min(1.0, batch_size / n), z, steps, orders)
    return rdp_to_epsilon(profile, delta)[0]


def min_pvalue_bound(epsilon: float, n_s: int, sigma0: float, sigma1: float) -> float:
    """Smallest p-value an epsilon-DP model can yield in the ownership test."""
    if epsilon < 0:
        raise DomainError("epsilon must be >= 0")
    if n_s < 1:
        raise DomainError("n_s must be >= 1")
    if not (sigma0 > 0 and sigma1 > 0):
        raise DomainError("sigma0 and sigma1 must be > 0")
    z = math.expm1(epsilon) * math.sqrt(n_s) / math.sqrt(sigma0**2 + sigma1**2)
    return norm_sf(z)


def bound_curve(eps_grid: Iterable[float], n_s_list: Iterable[int], sigma0: float, sigma1: float) -> list:
    eps_grid, n_s_list = list(eps_grid), list(n_s_list)
    if not eps_grid or not n_s_list:
        raise DomainError("epsilon grid and n_s list must be nonempty")
    ss = sigma0**2 + sigma1**2
    rows = [
        DpBoundPoint(float(e), int(n), ss, min_pvalue_bound(e, n, sigma0, sigma1))
        for n in sorted(n_s_list)
        for e in sorted(eps_grid)
    ]
    return rows


def curve_to_csv(rows: Sequence[DpBoundPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epsilon", "n_s", "sigma_sq_sum", "min_p"])
    for r in rows:
        w.writerow([f"{r.epsilon:.17g}", r.n_s, f"{r.sigma_sq_sum:.17g}", f"{r.min_p:.17g}"])
    return buf.getvalue()
