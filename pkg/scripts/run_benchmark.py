"""Desk-scale steal-and-verify experiment.

Trains the overfit victim, its ME/KD/FT copies, ten independent models and
the shadow farms, then prints three tables: per-suspect verification
p-values over ten sampling seeds, the smallest exposure n_s per attack and
mode, and summary statistics of the per-sample eta scores.

    python3 scripts/run_benchmark.py --out results/benchmark.json
"""

import argparse
import json
import time

import numpy as np

from veridip import benchmark, shadow, verify
from veridip.oracle import LocalOracle

GRID = (2, 3, 4, 5, 6, 8, 10, 12, 15, 20, 25, 30, 40, 50, 60, 80, 100)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="benchmark root seed")
    ap.add_argument("--n-s", type=int, default=100)
    ap.add_argument("--alpha", type=float, default=0.01)
    ap.add_argument("--repeats", type=int, default=5, help="repeats per grid point in the exposure search")
    ap.add_argument("--skip-eta", action="store_true", help="skip the 100-model eta farm")
    ap.add_argument("--out", help="write all results as JSON here")
    args = ap.parse_args(argv)

    t0 = time.perf_counter()
    b = benchmark.Benchmark(benchmark.BenchmarkConfig(seed=args.seed))
    suspects = {"victim": b.victim, **b.copies}
    print(f"victim accuracy: train {b.accuracy(b.victim, b.members):.3f}, test {b.accuracy(b.victim):.3f}")
    for name, model in b.copies.items():
        print(f"{name} copy accuracy: test {b.accuracy(model):.3f}")
    farm = b.farm
    print(f"built models and {farm.n_models}-model farm in {time.perf_counter() - t0:.0f}s\n")
    results = {"config": b.config.__dict__, "verification": {}, "min_exposed": {}}

    print(f"per-sample basic verification, n_s={args.n_s}, alpha={args.alpha}")
    for name, model in {**suspects, **{f"independent{i}": m for i, m in enumerate(b.independents)}}.items():
        attack = verify.AttackSpec("global" if name.startswith("independent") else "per-sample")
        ps = [
            verify.ownership_test(LocalOracle(model), b.members, b.nonmembers, args.n_s, args.alpha,
                                  attack, "basic", farm, seed).p_value
            for seed in range(10)
        ]
        hits = sum(p < args.alpha for p in ps)
        results["verification"][name] = {"attack": attack.kind, "p_values": ps}
        print(f"  {name:<14} {attack.kind:<10} detected {hits:2d}/10  median p {np.median(ps):.2e}")

    print(f"\nsmallest n_s with median p < {args.alpha}")
    for name, model in suspects.items():
        row = {}
        for kind in verify.ATTACK_KINDS:
            for mode in verify.MODES:
                row[f"{kind}/{mode}"] = verify.min_exposed_search(
                    LocalOracle(model), b.members, b.nonmembers, args.alpha, verify.AttackSpec(kind), mode, farm,
                    GRID, args.repeats,
                )
        results["min_exposed"][name] = row
        print(f"  {name:<8} " + "  ".join(f"{k}={v}" for k, v in row.items()))

    if not args.skip_eta:
        etas = np.array([e.eta for e in shadow.eta_scores(b.eta_farm)])
        med = float(np.median(etas))
        results["eta"] = {"n_models": b.eta_farm.n_models, "mean": float(etas.mean()), "median": med,
                          "max": float(etas.max())}
        print(f"\neta over {b.eta_farm.n_models} models: mean {etas.mean():.4g}, median {med:.4g}, "
              f"max {etas.max():.4g} ({etas.max() / med:.1f}x median)")

    print(f"\ntotal {time.perf_counter() - t0:.0f}s")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
