"""MAP vs sketch posterior on the bundled MNIST subset, one JSON record per seed.

Takes roughly 1.5 minutes per seed on a laptop CPU.
"""

import argparse
import json
import logging

from ella.data import load_mnist5k
from ella.experiments import MnistConfig, mnist_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--iterations", type=int, default=MnistConfig.iterations)
    ap.add_argument("--out", default="results/mnist.jsonl")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    ds = load_mnist5k()
    with open(args.out, "w") as fh:
        for seed in args.seeds:
            res = mnist_study(MnistConfig(seed=seed, iterations=args.iterations), ds)
            for part in ("map", "ella"):
                res[part].pop("bins")
            fh.write(json.dumps(res) + "\n")
            print(f"seed {seed}: NLL {res['map']['nll']:.4f} -> {res['ella']['nll']:.4f}  "
                  f"ECE {res['map']['ece']:.4f} -> {res['ella']['ece']:.4f}  "
                  f"({res['seconds']:.0f}s)")


if __name__ == "__main__":
    main()
