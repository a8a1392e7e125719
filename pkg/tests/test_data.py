import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from veridip import data, nn
from veridip.errors import ColumnNotFoundError, DataError, DomainError, SampleSizeError


def test_balanced_counts():
    ds = data.gen_synthetic(100, 3, 2, seed=4)
    assert np.bincount(ds.labels).tolist() == [50, 50]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(3, 300), k=st.integers(2, 5), seed=st.integers(0, 2**32))
def test_balanced_within_one(n, k, seed):
    if n < k:
        return
    counts = np.bincount(data.gen_synthetic(n, k, k, seed=seed).labels, minlength=k)
    assert counts.max() - counts.min() <= 1


def test_deterministic_bytes():
    a = data.gen_synthetic(50, 4, 3, 1.5, 0.1, seed=9)
    b = data.gen_synthetic(50, 4, 3, 1.5, 0.1, seed=9)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert not data.gen_synthetic(50, 4, 3, 1.5, 0.1, seed=10).equals(a)


def test_means_equidistant_with_norm():
    for k, d in ((2, 1), (3, 2), (5, 7)):
        m = data.simplex_means(k, d, 3.0)
        assert np.allclose(np.linalg.norm(m, axis=1), 3.0)
        dists = [np.linalg.norm(m[i] - m[j]) for i, j in itertools.combinations(range(k), 2)]
        assert np.allclose(dists, dists[0])


def test_label_noise_rate():
    # with well separated clusters the nearest mean recovers the clean label
    n, rho = 4000, 0.2
    ds = data.gen_synthetic(n, 3, 3, separation=40.0, label_noise=rho, seed=2)
    means = data.simplex_means(3, 3, 40.0)
    clean = np.argmin(((ds.features[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    rate = (clean != ds.labels).mean()
    assert abs(rate - rho) <= 3 * math.sqrt(rho * (1 - rho) / n)


def test_domain_errors():
    for kw in (dict(n=1, d=2, k=2), dict(n=10, d=0, k=2), dict(n=10, d=2, k=2, separation=-1),
               dict(n=10, d=2, k=2, label_noise=0.5), dict(n=10, d=1, k=3)):
        with pytest.raises(DomainError):
            data.gen_synthetic(**kw)


def test_separable_clusters_learnable():
    ds = data.gen_synthetic(2000, 2, 2, separation=8.0, seed=1)
    tr, te, _ = data.split(ds, data.SplitSpec((0.5, 0.25, 0.25), 0))
    model, _ = nn.train(nn.mlp_init((2, 16, 2), seed=0), tr, nn.TrainConfig(epochs=30, seed=0))
    acc = (nn.forward_proba(model, te.features).argmax(1) == te.labels).mean()
    assert acc >= 0.99


def test_csv_round_trip(tmp_path):
    ds = data.gen_synthetic(30, 3, 3, 1.0, 0.1, seed=5)
    path = tmp_path / "d.csv"
    data.save_csv(ds, path)
    back = data.load_csv(path)
    assert back.equals(ds)
    assert back.feature_names == ("x0", "x1", "x2")


def test_csv_direct_parse(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x0,x1,label\n0,1,0\n1,0,1\n")
    ds = data.load_csv(path)
    assert len(ds) == 2 and ds.n_features == 2 and ds.n_classes == 2
    assert ds.features.tolist() == [[0, 1], [1, 0]]
    assert ds.provenance == "csv"


def test_csv_errors(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x0,x1,y\n0,1,0\n")
    with pytest.raises(ColumnNotFoundError, match="'label'"):
        data.load_csv(path)
    path.write_text("x0,x1,label\n0,1,0\n0,abc,1\n")
    with pytest.raises(DataError, match=r"row 3, column 'x1'"):
        data.load_csv(path)
    path.write_text("")
    with pytest.raises(DataError, match="empty"):
        data.load_csv(path)


def test_split_sizes_and_errors():
    ds = data.gen_synthetic(100, 2, seed=0)
    parts = data.split(ds, data.SplitSpec((0.5, 0.25, 0.25), 1))
    assert [len(p) for p in parts] == [50, 25, 25]
    with pytest.raises(DomainError):
        data.split(data.gen_synthetic(4, 2, seed=0), data.SplitSpec((0.8, 0.1, 0.1), 0))
    with pytest.raises(DomainError):
        data.SplitSpec((0.5, 0.5, 0.1))
    a = data.split_indices(100, data.SplitSpec(seed=1))[0]
    b = data.split_indices(100, data.SplitSpec(seed=2))[0]
    assert not np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(3, 500), a=st.floats(0.05, 0.9), b=st.floats(0.05, 0.9), seed=st.integers(0, 1000))
def test_split_is_partition(n, a, b, seed):
    if a + b >= 0.95:
        return
    spec = data.SplitSpec((a, b, 1 - a - b), seed)
    idx = data.split_indices(n, spec)
    if min(len(p) for p in idx) < 1:
        return
    allidx = np.concatenate(idx)
    assert sorted(allidx.tolist()) == list(range(n))


def test_sample_pair_contracts():
    members = data.gen_synthetic(20, 2, seed=1)
    nonmembers = data.gen_synthetic(30, 2, seed=2)
    d0, d1 = data.sample_pair(members, nonmembers, 20, seed=3)
    assert sorted(map(tuple, d0.features.tolist())) == sorted(map(tuple, members.features.tolist()))
    assert len(d1) == 20
    d0, _ = data.sample_pair(members, nonmembers, 3, seed=3, fixed_member_ids=[3, 1, 4])
    assert np.array_equal(d0.features, members.features[[3, 1, 4]])
    member_rows = set(map(tuple, members.features.tolist()))
    _, d1 = data.sample_pair(members, nonmembers, 10, seed=4)
    assert not member_rows & set(map(tuple, d1.features.tolist()))
    with pytest.raises(SampleSizeError):
        data.sample_pair(members, nonmembers, 21, seed=0)
    with pytest.raises(SampleSizeError):
        data.sample_pair(members, nonmembers, 3, seed=0, fixed_member_ids=[1, 2])


def test_sample_ids_without_replacement_and_seeded():
    members = data.gen_synthetic(50, 2, seed=1)
    ids0, ids1 = data.sample_ids(members, members, 30, seed=7)
    assert len(set(ids0.tolist())) == 30 and len(set(ids1.tolist())) == 30
    again = data.sample_ids(members, members, 30, seed=7)
    assert np.array_equal(ids0, again[0]) and np.array_equal(ids1, again[1])


def test_dataset_validation():
    with pytest.raises(DataError):
        data.Dataset(np.array([[np.nan]]), np.array([0]))
    with pytest.raises(DataError):
        data.Dataset(np.zeros((2, 1)), np.array([0]))
    with pytest.raises(DataError):
        data.Dataset(np.zeros((1, 1)), np.array([-1]))
