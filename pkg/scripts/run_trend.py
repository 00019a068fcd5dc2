"""Approximation-error trend on two-moons: eps_nystrom and eps_ella for several (M, K).

Usage: python scripts/run_trend.py [--out results/trend.csv]
"""

import argparse
import csv
import logging

from ella.experiments import TrendConfig, median_by, trend_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/trend.csv")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    cfg = TrendConfig(seeds=tuple(range(args.seeds)))
    rows = trend_study(cfg)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for M, K in cfg.pairs:
        print(f"M={M:4d} K={K:3d}  median eps_nystrom {median_by(rows, 'eps_nystrom', M=M, K=K):.3e}"
              f"  median eps_ella {median_by(rows, 'eps_ella', M=M, K=K):.4f}")


if __name__ == "__main__":
    main()
