import math

import numpy as np
import pytest

from veridip import data, mia, nn, shadow
from veridip.errors import CoverageError, DomainError

CFG = nn.TrainConfig(epochs=5, batch_size=16, seed=0)


@pytest.fixture(scope="module")
def small_farm():
    ds = data.gen_synthetic(100, 3, 2, 1.5, seed=1)
    return shadow.build_farm(ds, 8, CFG, (3, 8, 2), seed=4)


def test_half_split_rows(small_farm):
    assert small_farm.membership_mask.shape == (8, 100)
    assert (small_farm.membership_mask.sum(axis=1) == 50).all()
    odd = shadow.half_masks(8, 101, 0).sum(axis=1)
    assert set(odd.tolist()) <= {50, 51}
    cols = shadow.half_masks(9, 101, 0).sum(axis=0)
    assert set(cols.tolist()) <= {4, 5}


def test_deterministic(small_farm):
    again = shadow.build_farm(small_farm.base_dataset, 8, CFG, (3, 8, 2), seed=4)
    assert all(nn.serialize(a) == nn.serialize(b) for a, b in zip(small_farm.models, again.models))
    assert np.array_equal(small_farm.membership_mask, again.membership_mask)


def test_workers_do_not_change_result(small_farm):
    threaded = shadow.build_farm(small_farm.base_dataset, 8, CFG, (3, 8, 2), seed=4, workers=3)
    assert all(nn.serialize(a) == nn.serialize(b) for a, b in zip(small_farm.models, threaded.models))


def test_in_counts_concentrate():
    n_models, n = 100, 200
    mask = shadow.half_masks(n_models, n, 11)
    counts = mask.sum(axis=0)
    assert np.all(np.abs(counts - n_models / 2) <= 3 * math.sqrt(n_models) / 2)
    # distinct pairs draw distinct halves
    assert len({mask[i].tobytes() for i in range(0, n_models, 2)}) == n_models // 2


def test_minimum_models_and_coverage():
    ds = data.gen_synthetic(20, 2, seed=0)
    with pytest.raises(DomainError):
        shadow.build_farm(ds, 7, CFG, (2, 4, 2))
    mask = np.zeros((8, 4), dtype=bool)
    mask[:1, 0] = True
    with pytest.raises(CoverageError, match="larger N"):
        shadow._check_coverage(mask)


def _stub_farm(losses, mask):
    losses, mask = np.asarray(losses, float), np.asarray(mask, bool)
    n = losses.shape[1]
    base = data.Dataset(np.zeros((n, 1)), np.zeros(n, dtype=int))
    return shadow.ShadowFarm([], mask, base, CFG, (1, 2), "relu", 0, losses=losses)


def test_eta_hand_values():
    mask = [[1, 1, 1], [1, 1, 1], [0, 0, 0], [0, 0, 0]]
    losses = [[0.5, 0.3, 0.0], [0.5, 0.3, 0.0], [0.5, 0.9, 0.9], [0.5, 0.9, 0.9]]
    etas = {e.sample_id: e for e in shadow.eta_scores(_stub_farm(losses, mask))}
    assert etas[0].eta == 1.0
    assert math.isclose(etas[1].eta, 3.0)
    assert math.isclose(etas[2].eta, 0.9 / 1e-8) and math.isfinite(etas[2].eta)
    order = [e.sample_id for e in shadow.eta_scores(_stub_farm(losses, mask))]
    assert order == [2, 1, 0]


def test_select_less_private():
    etas = [shadow.EtaScore(0, 1.0, 1, 1), shadow.EtaScore(1, 5.0, 1, 5), shadow.EtaScore(2, 5.0, 1, 5)]
    assert shadow.select_less_private(etas, 2) == [1, 2]
    assert shadow.select_less_private(etas, 3) == [1, 2, 0]
    assert shadow.select_less_private(etas, 0) == []
    with pytest.raises(DomainError):
        shadow.select_less_private(etas, 4)


def test_eta_nonnegative_and_sorted(small_farm):
    etas = shadow.eta_scores(small_farm)
    vals = [e.eta for e in etas]
    assert all(v >= 0 and math.isfinite(v) for v in vals)
    assert vals == sorted(vals, reverse=True)
    assert len({e.sample_id for e in etas}) == 100


def test_gauss_fits_match_pairwise(small_farm):
    mu_in, s_in, mu_out, s_out = small_farm.gauss_fits()
    for j in (0, 17, 99):
        conf = mia.logit_confidences(small_farm.losses[:, j])
        m = small_farm.membership_mask[:, j]
        ref = mia.fit_gauss_pair(conf[m], conf[~m])
        assert math.isclose(mu_in[j], ref.mu_in, rel_tol=1e-12, abs_tol=1e-12)
        assert math.isclose(s_in[j], ref.sigma_in, rel_tol=1e-9)
        assert math.isclose(mu_out[j], ref.mu_out, rel_tol=1e-12, abs_tol=1e-12)
        assert math.isclose(s_out[j], ref.sigma_out, rel_tol=1e-9)
        assert small_farm.pair(j) == ref


def test_loo_ratios_match_direct_refit(small_farm):
    r, mask, valid = shadow.loo_log_ratios(small_farm)
    conf = small_farm.confidences()
    for i, j in ((0, 0), (3, 42), (7, 99)):
        keep = np.arange(small_farm.n_models) != i
        col, m = conf[keep, j], mask[keep, j]
        pair = mia.fit_gauss_pair(col[m], col[~m])
        direct = math.log(mia.lira_score(conf[i, j], pair))
        assert valid[i, j]
        assert math.isclose(r[i, j], direct, rel_tol=1e-6, abs_tol=1e-6)


def test_save_load_round_trip(small_farm, tmp_path):
    shadow.save_farm(small_farm, tmp_path / "farm")
    back = shadow.load_farm(tmp_path / "farm")
    assert np.array_equal(back.membership_mask, small_farm.membership_mask)
    assert all(nn.serialize(a) == nn.serialize(b) for a, b in zip(small_farm.models, back.models))
    assert back.base_dataset.equals(small_farm.base_dataset)
    assert np.array_equal(back.losses, small_farm.losses)
    assert back.train_config == small_farm.train_config
