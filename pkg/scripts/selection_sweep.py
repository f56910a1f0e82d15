#!/usr/bin/env python3
"""Indicator-selection comparison on a synthetic configuration set.

Ranks the 62 indicators with each method, sweeps subset sizes, and prints
the smallest subset reaching the maximal calibrated F1 per method.

    python3 scripts/selection_sweep.py --k 10 --d 64
"""

import argparse
import sys

from dfbscan import (
    SynthSpec,
    featurize,
    indicator_catalog,
    rank_by_accuracy,
    rank_by_iforest,
    rank_by_mutual_info,
    rfe_ranking,
    select_l1_logistic,
    sweep_subset,
)
from dfbscan.synth import DEFAULT_BENCHMARK_ATTACKS, generate_benchmark


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--cleans", type=int, default=30)
    ap.add_argument("--per-attack", type=int, default=6)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args(argv)

    config, _ = generate_benchmark(
        SynthSpec(k=args.k, d=args.d),
        counts=(args.cleans, args.per_attack),
        attacks=DEFAULT_BENCHMARK_ATTACKS,
        master_seed=args.seed,
    )
    table = featurize(config)
    names = {n: name for n, _, name in indicator_catalog()}

    rankings = {
        "acc": rank_by_accuracy(config),
        "mi": rank_by_mutual_info(table),
        "rfe": rfe_ranking(table),
        "iforest": rank_by_iforest(table, seed=args.seed),
    }
    print(f"config set: {len(config.cleans)} cleans + {len(config.backdoors)} backdoors\n")
    print(f"{'method':8s} {'N*':>3s} {'F1*':>6s} {'F1@62':>6s}  top-5 indicators")
    for method, ranking in rankings.items():
        result = sweep_subset(config, ranking, method=method)
        top = ", ".join(names[i] for i in ranking[:5])
        print(
            f"{method:8s} {result.n:3d} {result.f1:6.3f} {result.curve[-1]:6.3f}  {top}"
        )

    path = select_l1_logistic(table, config)
    scored = [p for p in path if p.f1 is not None]
    if scored:
        best = max(scored, key=lambda p: (p.f1, -len(p.support)))
        print(
            f"{'l1lr':8s} {len(best.support):3d} {best.f1:6.3f} {'':>6s}  "
            f"penalty={best.penalty:.3g}, support={list(best.support)[:5]}..."
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
