"""Datasets: synthetic Gaussian clusters, CSV I/O, splits and the
member/non-member draws used by the ownership test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ColumnNotFoundError, DataError, DomainError, SampleSizeError


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: Optional[tuple] = None
    provenance: str = "synthetic"
    seed: Optional[int] = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or len(x) < 1:
            raise DataError(f"features must be a nonempty 2-D array, got shape {x.shape}")
        if y.shape != (len(x),):
            raise DataError(f"expected {len(x)} labels, got shape {y.shape}")
        if np.isnan(x).any():
            raise DataError("features contain NaN")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.mod(y, 1) == 0):
                raise DataError("labels must be integers")
        y = y.astype(np.int64)
        if y.min() < 0:
            raise DataError("labels must be non-negative")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, ids) -> "Dataset":
        ids = np.asarray(ids, dtype=np.int64)
        return Dataset(self.features[ids], self.labels[ids], self.feature_names, self.provenance, self.seed)

    def equals(self, other: "Dataset") -> bool:
        return np.array_equal(self.features, other.features) and np.array_equal(self.labels, other.labels)


def concat(a: Dataset, b: Dataset) -> Dataset:
    return Dataset(
        np.vstack([a.features, b.features]), np.concatenate([a.labels, b.labels]), a.feature_names, a.provenance
    )


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.5, 0.25, 0.25)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise DomainError("fractions must be three positive numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise DomainError(f"fractions must sum to 1, got {sum(self.fractions)}")


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), stream])))


def simplex_means(k: int, d: int, norm: float) -> np.ndarray:
    """k mutually equidistant points of the given norm in R^d (needs d >= k - 1)."""
    if d < k - 1:
        raise DomainError(f"{k} equidistant class means need d >= {k - 1}, got d={d}")
    centered = np.eye(k) - 1.0 / k
    # orthonormal basis of the (k-1)-dim subspace the centered vertices live in
    u, _, _ = np.linalg.svd(centered)
    coords = centered @ u[:, : k - 1]
    coords /= np.linalg.norm(coords, axis=1, keepdims=True)
    out = np.zeros((k, d))
    out[:, : k - 1] = coords * norm
    return out


def gen_synthetic(
    n: int, d: int, k: int = 2, separation: float = 2.0, label_noise: float = 0.0, seed: int = 0
) -> Dataset:
    """Unit-covariance Gaussian clusters with balanced classes and symmetric
    label noise (a flipped label goes to a uniformly random other class)."""
    if not (n >= k >= 2 and d >= 1 and separation >= 0 and 0 <= label_noise < 0.5):
        raise DomainError(f"invalid parameters n={n} d={d} k={k} separation={separation} noise={label_noise}")
    rng = _rng(seed)
    means = simplex_means(k, d, separation)
    true = rng.permutation(np.arange(n) % k)
    x = means[true] + rng.standard_normal((n, d))
    flip = rng.random(n) < label_noise
    shift = rng.integers(1, k, size=n)
    y = np.where(flip, (true + shift) % k, true)
    return Dataset(x, y, tuple(f"x{i}" for i in range(d)), "synthetic", int(seed))


def save_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    names = dataset.feature_names or tuple(f"x{i}" for i in range(dataset.n_features))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*names, label_column])
        for row, label in zip(dataset.features, dataset.labels):
            w.writerow([*(repr(float(v)) for v in row), int(label)])


def load_csv(path, label_column: str = "label") -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    if label_column not in header:
        raise ColumnNotFoundError(label_column)
    if not body:
        raise DataError(f"{path}: no data rows")
    li = header.index(label_column)
    feat_cols = [i for i in range(len(header)) if i != li]
    x = np.empty((len(body), len(feat_cols)))
    y = np.empty(len(body), dtype=np.int64)
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        for j, c in enumerate(feat_cols):
            try:
                x[r - 2, j] = float(row[c])
            except ValueError:
                raise DataError(f"{path}: non-numeric cell at row {r}, column {header[c]!r}") from None
        try:
            label = float(row[li])
        except ValueError:
            raise DataError(f"{path}: non-numeric label at row {r}") from None
        if label != int(label) or label < 0:
            raise DataError(f"{path}: label at row {r} is not a non-negative integer")
        y[r - 2] = int(label)
    return Dataset(x, y, tuple(header[c] for c in feat_cols), "csv", None)


def split(dataset: Dataset, spec: SplitSpec):
    """Disjoint (train, test, holdout) partition of a random permutation."""
    n = len(dataset)
    n_train = int(round(spec.fractions[0] * n))
    n_test = int(round(spec.fractions[1] * n))
    n_hold = n - n_train - n_test
    if min(n_train, n_test, n_hold) < 1:
        raise DomainError(f"split {spec.fractions} of {n} rows leaves an empty part")
    perm = _rng(spec.seed, 1).permutation(n)
    parts = perm[:n_train], perm[n_train : n_train + n_test], perm[n_train + n_test :]
    return tuple(dataset.subset(p) for p in parts)


def split_indices(n: int, spec: SplitSpec):
    """Index form of :func:`split` (same permutation)."""
    n_train = int(round(spec.fractions[0] * n))
    n_test = int(round(spec.fractions[1] * n))
    perm = _rng(spec.seed, 1).permutation(n)
    return perm[:n_train], perm[n_train : n_train + n_test], perm[n_train + n_test :]


def sample_ids(members: Dataset, nonmembers: Dataset, n_s: int, seed: int, fixed_member_ids=None):
    """Row ids of D0 (members) and D1 (non-members), drawn without replacement."""
    if n_s < 1:
        raise SampleSizeError("n_s must be >= 1")
    if len(members) < n_s or len(nonmembers) < n_s:
        raise SampleSizeError(
            f"n_s={n_s} exceeds a pool (members={len(members)}, nonmembers={len(nonmembers)})"
        )
    rng = _rng(seed, 2)
    if fixed_member_ids is not None:
        ids0 = np.asarray(fixed_member_ids, dtype=np.int64)
        if len(ids0) != n_s:
            raise SampleSizeError(f"fixed_member_ids has {len(ids0)} entries, expected {n_s}")
        if ids0.min() < 0 or ids0.max() >= len(members):
            raise SampleSizeError("fixed_member_ids out of range for the member pool")
    else:
        ids0 = rng.choice(len(members), size=n_s, replace=False)
    ids1 = rng.choice(len(nonmembers), size=n_s, replace=False)
    return ids0, ids1


def sample_pair(members: Dataset, nonmembers: Dataset, n_s: int, seed: int, fixed_member_ids=None):
    ids0, ids1 = sample_ids(members, nonmembers, n_s, seed, fixed_member_ids)
    return members.subset(ids0), nonmembers.subset(ids1)
