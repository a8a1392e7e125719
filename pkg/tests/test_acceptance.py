"""End-to-end acceptance checks, one test per criterion.

The scenario tests share one desk-scale benchmark (overfit victim on 200
synthetic rows, ME/KD/FT copies, ten independent models, shadow farms);
a PASS/FAIL line per criterion is printed in the terminal summary.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from veridip import accountant, benchmark, data, mia, nn, verify
from veridip.oracle import LocalOracle, RemoteOracle
from veridip.server import serve_model

ALPHA = 0.01
EXPOSURE_GRID = (2, 3, 4, 5, 6, 8, 10, 12, 15, 20, 25, 30, 40, 50, 60, 80, 100)


def note(record_property, text):
    record_property("detail", text)


@pytest.fixture(scope="session")
def bench():
    t0 = time.perf_counter()
    b = benchmark.Benchmark()
    b.victim, b.copies, b.farm
    b.build_seconds = time.perf_counter() - t0
    return b


# -- 1 ------------------------------------------------------------------------


def test_criterion_01_gradient_correctness(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(24):
        depth = int(rng.integers(1, 4))
        dims = (int(rng.integers(1, 5)), *rng.integers(2, 6, size=depth).tolist(), int(rng.integers(2, 4)))
        act = ("relu", "tanh")[trial % 2]
        model = nn.mlp_init(dims, act, seed=trial)
        # random biases so relu kinks sit away from the probe points
        model = model.with_params(model.weights, [rng.normal(0, 0.5, b.shape) for b in model.biases])
        x = rng.normal(size=(5, dims[0]))
        y = rng.integers(0, dims[-1], size=5)
        wg, bg = nn.grad(model, x, y)
        params = list(model.weights) + list(model.biases)
        analytic = list(wg) + list(bg)
        h = 1e-6
        for k, (p, g) in enumerate(zip(params, analytic)):
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                plus, minus = [q.copy() for q in params], [q.copy() for q in params]
                plus[k][idx] += h
                minus[k][idx] -= h
                n = len(model.weights)
                lp = nn.ce_loss(nn.forward_proba(model.with_params(plus[:n], plus[n:]), x), y).mean()
                lm = nn.ce_loss(nn.forward_proba(model.with_params(minus[:n], minus[n:]), x), y).mean()
                num[idx] = (lp - lm) / (2 * h)
            denom = max(np.linalg.norm(num) + np.linalg.norm(g), 1e-12)
            worst = max(worst, np.linalg.norm(num - g) / denom)
    elapsed = time.perf_counter() - t0
    note(record_property, f"24 models, worst relative error {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-5
    assert elapsed < 10


# -- 2 ------------------------------------------------------------------------


def _game_advantage(members, nonmembers, threshold):
    """Exact value of 2 Pr[correct] - 1 over every (coin, sample) outcome."""
    correct = Fraction(0)
    for b, pool in ((1, members), (0, nonmembers)):
        for s in pool:
            correct += Fraction(1, 2 * len(pool)) * ((s > threshold) == b)
    return 2 * correct - 1


def test_criterion_02_advantage_oracle(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(300):
        m = (rng.integers(0, 9, size=rng.integers(1, 9)) / 8).tolist()
        o = (rng.integers(0, 9, size=rng.integers(1, 9)) / 8).tolist()
        for t in np.arange(-1, 9) / 8 + 1 / 16:
            want = _game_advantage(m, o, t)
            assert mia.advantage_exact(m, o, float(t)) == want
            assert mia.advantage(mia.ScoreSet.of(m, o), float(t)) == float(want)
            checked += 1
    elapsed = time.perf_counter() - t0
    note(record_property, f"{checked} instances exact, {elapsed:.2f}s")
    assert elapsed < 1


# -- 3 ------------------------------------------------------------------------


def test_criterion_03_pvalue_vs_permutation(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    gaps = []
    for trial in range(20):
        shift = 0.6 * trial / 19
        m, o = rng.normal(shift, 1, 50), rng.normal(0, 1, 50)
        analytic = verify.p_value(verify.fingerprint_from_scores(m, o))
        perm = verify.permutation_pvalue(m, o, 10_000, seed=trial)
        gaps.append(abs(analytic - perm))
    elapsed = time.perf_counter() - t0
    note(record_property, f"max |analytic - permutation| {max(gaps):.4f}, {elapsed:.1f}s")
    assert max(gaps) < 0.02
    assert elapsed < 30


# -- 4 ------------------------------------------------------------------------


def _h0_pvalues(bench):
    ps = []
    for model in bench.independents:
        oracle = LocalOracle(model)
        for r in range(20):
            ps.append(verify.ownership_test(oracle, bench.members, bench.nonmembers, 100, ALPHA, seed=r).p_value)
    return np.array(ps)


def test_criterion_04_h0_calibration(bench, record_property):
    ps = _h0_pvalues(bench)
    frac = float((ps < ALPHA).mean())
    note(record_property, f"{len(ps)} runs, {frac:.1%} below {ALPHA}, median p {np.median(ps):.3f}")
    assert len(ps) == 200
    assert frac <= 0.05


def test_h0_pvalue_mean_near_half(bench):
    ps = _h0_pvalues(bench)
    assert 0.4 <= ps.mean() <= 0.6


# -- 5 ------------------------------------------------------------------------


def test_criterion_05_steal_and_verify(bench, record_property):
    t0 = time.perf_counter()
    gap = bench.accuracy(bench.victim, bench.members) - bench.accuracy(bench.victim)
    suspects = {"victim": bench.victim, **bench.copies}
    attack = verify.AttackSpec("per-sample")
    worst = {}
    passing_seeds = 0
    for seed in range(10):
        ok = True
        for name, model in suspects.items():
            v = verify.ownership_test(LocalOracle(model), bench.members, bench.nonmembers, 100, ALPHA,
                                      attack, "basic", bench.farm, seed)
            worst[name] = max(worst.get(name, 0.0), v.p_value)
            ok &= v.outcome == 1
        passing_seeds += ok
    elapsed = bench.build_seconds + time.perf_counter() - t0
    detail = ", ".join(f"{k} max p {v:.1e}" for k, v in worst.items())
    note(record_property, f"gap {gap:.2f}, {passing_seeds}/10 seeds, {detail}, {elapsed:.0f}s")
    assert gap >= 0.10
    assert passing_seeds >= 9
    assert elapsed < 600


# -- 6 ------------------------------------------------------------------------


def test_criterion_06_enhanced_dominance(bench, record_property):
    oracle = LocalOracle(bench.victim)
    found = {}
    for kind in verify.ATTACK_KINDS:
        for mode in verify.MODES:
            found[kind, mode] = verify.min_exposed_search(
                oracle, bench.members, bench.nonmembers, ALPHA, verify.AttackSpec(kind), mode, bench.farm,
                EXPOSURE_GRID, repeats=5,
            )
    inf = math.inf
    note(record_property, ", ".join(f"{k}/{m}={v}" for (k, m), v in found.items()))
    for kind in verify.ATTACK_KINDS:
        basic, enh = found[kind, "basic"], found[kind, "enhanced"]
        assert (inf if enh is None else enh) <= (inf if basic is None else basic)
    assert found["per-sample", "enhanced"] is not None and found["per-sample", "enhanced"] <= 20


# -- 7 ------------------------------------------------------------------------


def test_criterion_07_eta_long_tail(bench, record_property):
    from veridip import shadow

    etas = np.array([e.eta for e in shadow.eta_scores(bench.eta_farm)])
    mean, med, top = etas.mean(), np.median(etas), etas.max()
    note(record_property, f"N={bench.eta_farm.n_models}, mean {mean:.3g}, median {med:.3g}, max/median {top / med:.2f}")
    assert mean > med
    assert top > 5 * med


# -- 8 ------------------------------------------------------------------------


def test_criterion_08_dp_bound(record_property):
    t0 = time.perf_counter()
    s = 0.3287 / math.sqrt(2)
    at_01 = accountant.min_pvalue_bound(0.1, 10, s, s)
    at_0 = accountant.min_pvalue_bound(0.0, 10, s, s)
    grid = np.linspace(0, 3, 100)
    curve = [r.min_p for r in accountant.bound_curve(grid, [10], s, s)]
    monotone = all(b <= a for a, b in zip(curve, curve[1:]))
    elapsed = time.perf_counter() - t0
    note(record_property, f"bound(0.1)={at_01:.4f}, bound(0)={at_0}, monotone={monotone}, {elapsed * 1e3:.0f}ms")
    assert abs(at_01 - 0.156) <= 0.002
    assert at_0 == 0.5
    assert monotone and len(curve) == 100
    assert elapsed < 1


# -- 9 ------------------------------------------------------------------------


def test_criterion_09_dp_sgd_invariants(record_property):
    t0 = time.perf_counter()
    ds = data.gen_synthetic(300, 5, 3, 2.0, seed=4)
    cfg = nn.DpConfig(clip_threshold=0.5, noise_multiplier=1.1, epochs=5, batch_size=30, learning_rate=0.1, seed=1)
    norms = []
    nn.dp_train(nn.mlp_init((5, 16, 3), seed=1), ds, cfg, on_step=lambda info: norms.append(info["clipped_norms"]))
    peak = float(np.concatenate(norms).max())
    closed = accountant.rdp_subsampled_gaussian(1.0, 2.0, 7, [2, 3, 8])
    exact = closed.rdp_values == tuple(7 * a / (2 * 2.0**2) for a in (2, 3, 8))
    eps = [accountant.epsilon_for_training(300, 30, 5, z, 1e-5) for z in (1, 2, 4, 8)]
    decreasing = all(b < a for a, b in zip(eps, eps[1:]))
    elapsed = time.perf_counter() - t0
    note(record_property, f"max clipped norm {peak:.6f} (C=0.5), eps {[round(e, 3) for e in eps]}, {elapsed:.1f}s")
    assert peak <= cfg.clip_threshold
    assert exact and decreasing
    assert elapsed < 60


# -- 10 / 11 ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def served(bench):
    srv = serve_model(bench.victim, port=0)
    yield srv
    srv.shutdown()


def test_criterion_10_query_efficiency(bench, served, record_property):
    remote = RemoteOracle(served.url)
    verdict = verify.ownership_test(remote, bench.members, bench.nonmembers, 10, ALPHA)
    note(record_property, f"n_s=10 -> {remote.query_count} queries, p={verdict.p_value:.2e}")
    assert remote.query_count == 20


def test_criterion_11_serialization_and_protocol(bench, served, record_property):
    import json
    import urllib.error
    import urllib.request

    blob = nn.serialize(bench.victim)
    back = nn.deserialize(blob)
    bit_exact = nn.serialize(back) == blob and back.params_equal(bench.victim)
    rows = data.concat(bench.members, bench.test)
    diff = np.max(np.abs(RemoteOracle(served.url).losses(rows.features, rows.labels)
                         - LocalOracle(bench.victim).losses(rows.features, rows.labels)))

    def post(body: bytes):
        req = urllib.request.Request(served.url + "/predict", data=body, headers={"Content-Type": "application/json"})
        try:
            urllib.request.urlopen(req, timeout=5)
            return 200, {}
        except urllib.error.HTTPError as exc:
            return exc.code, json.loads(exc.read())

    width = bench.config.n_features
    bad_width = post(json.dumps({"features": [[0.0] * (width - 1)]}).encode())
    bad_json = post(b"features=1")
    note(record_property, f"bit-exact={bit_exact}, loop-back max diff {diff:.1e}, 400s: {bad_width[0]}/{bad_json[0]}")
    assert bit_exact
    assert diff <= 1e-9
    assert bad_width[0] == 400 and str(width) in bad_width[1]["error"]
    assert bad_json[0] == 400 and "error" in bad_json[1]
