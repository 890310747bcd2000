"""Run the phantom strategy matrix and print the directional comparison.

    python3 scripts/desk_matrix.py [--config configs/desk.toml] [--out out/desk] [--jobs 1]
"""

import argparse
import statistics
import sys
import time
from pathlib import Path

from ganaug import cli
from ganaug.data import StrategyId
from ganaug.evaluation import read_results, summarize

REPO = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(REPO / "configs" / "desk.toml"))
    ap.add_argument("--out", default="out/desk")
    ap.add_argument("--jobs", default="1")
    args = ap.parse_args()

    t0 = time.perf_counter()
    if cli.main(["eval-matrix", "--config", args.config, "--out", args.out, "--jobs", args.jobs]):
        return 1
    minutes = (time.perf_counter() - t0) / 60

    table = read_results(Path(args.out) / "results.csv")
    print(f"{len(table)} records in {minutes:.1f} min\n")
    print(f"{'strategy':10s} {'k':>5s} {'F1 mean':>8s} {'std':>7s}")
    for row in summarize(table):
        print(f"{row.strategy.display_name:10s} {row.k:5d} {row.f1_mean:8.3f} {row.f1_std:7.3f}")

    ks = sorted({r.k for r in table})
    mean = lambda s, k: statistics.fmean(r.f1 for r in table if r.strategy == s and r.k == k)
    small = ks[0]
    print(f"\nAug GAN - ORG at k={small}: {mean(StrategyId.AUG_GAN, small) - mean(StrategyId.ORG, small):+.3f}")
    avg = lambda s: statistics.fmean(mean(s, k) for k in ks)
    print(f"Aug GAN - GAN averaged over k: {avg(StrategyId.AUG_GAN) - avg(StrategyId.GAN):+.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
