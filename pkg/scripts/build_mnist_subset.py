"""Write the bundled 5k MNIST subset as IDX files.

The source is the 5000-image MNIST sample shipped with mlxtend
(``mlxtend/data/data/mnist_5k.csv.gz``: 784 pixel columns then the label).
The rows are sorted by class, so the split is stratified: per class, the
first 80% of rows go to training and the rest to test, then each split is
shuffled with a fixed seed.

    python scripts/build_mnist_subset.py [--csv PATH] [--out DIR]
"""
import argparse
import gzip
import io
from pathlib import Path

import numpy as np

from feduhb.datasets import PACKAGED_MNIST, write_idx


def locate_csv():
    import mlxtend.data

    return Path(mlxtend.data.__file__).parent / "data" / "mnist_5k.csv.gz"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--csv", type=Path, default=None)
    ap.add_argument("--out", type=Path, default=PACKAGED_MNIST)
    ap.add_argument("--train-fraction", type=float, default=0.8)
    args = ap.parse_args()

    src = args.csv or locate_csv()
    table = np.loadtxt(io.StringIO(gzip.decompress(src.read_bytes()).decode()), delimiter=",")
    pixels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    args.out.mkdir(parents=True, exist_ok=True)
    train_idx, test_idx = [], []
    for c in range(10):
        rows = np.flatnonzero(labels == c)
        cut = int(round(args.train_fraction * len(rows)))
        train_idx.extend(rows[:cut])
        test_idx.extend(rows[cut:])
    rng = np.random.default_rng(0)
    for prefix, idx in (("train", train_idx), ("t10k", test_idx)):
        idx = rng.permutation(np.asarray(idx))
        write_idx(args.out / f"{prefix}-images-idx3-ubyte.gz", pixels[idx])
        write_idx(args.out / f"{prefix}-labels-idx1-ubyte.gz", labels[idx])
        print(f"{prefix}: {len(idx)} images, class counts {np.bincount(labels[idx], minlength=10).tolist()}")


if __name__ == "__main__":
    main()
