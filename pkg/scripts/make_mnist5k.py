"""Convert the 5000-image MNIST subset shipped in the mlxtend wheel to gzipped IDX.

Usage: python scripts/make_mnist5k.py path/to/mlxtend-*.whl [out_dir]

The wheel can be fetched with ``pip download mlxtend --no-deps``.
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from ella.data import write_idx


def main():
    wheel = sys.argv[1]
    out = Path(sys.argv[2] if len(sys.argv) > 2 else "src/ella/_data/mnist5k")
    out.mkdir(parents=True, exist_ok=True)
    raw = gzip.decompress(zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    write_idx(out / "images-idx3-ubyte.gz", out / "labels-idx1-ubyte.gz", images, labels)
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main()
