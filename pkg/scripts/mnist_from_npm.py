"""Build the bundled desk-scale MNIST split from the ``mnist`` npm package.

The npm package (cazala/mnist, v1.1.0) ships 10,000 MNIST digits as JSON
arrays of pixel/255 rounded to three decimals; rounding back to bytes is exact.
This writes a class-stratified 8000/2000 train/test split as gzipped IDX files.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/mnist_from_npm.py package/src/digits data/mnist
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from iterlin.data import Dataset, stratified_subset, write_idx


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits", type=Path, help="directory holding 0.json .. 9.json")
    ap.add_argument("out", type=Path)
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for d in range(10):
        flat = np.asarray(json.loads((args.digits / f"{d}.json").read_text())["data"], dtype=np.float64)
        px = np.rint(flat * 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), d, dtype=np.uint8))
    images, labels = np.concatenate(images), np.concatenate(labels)

    # subset an index column so the complementary train rows are known
    tagged = Dataset(np.arange(len(labels)), labels.astype(np.int64), num_classes=10)
    test_idx = stratified_subset(tagged, args.test, seed=args.seed).inputs
    mask = np.ones(len(labels), dtype=bool)
    mask[test_idx] = False
    train_idx = np.flatnonzero(mask)
    train_idx = train_idx[np.random.default_rng(args.seed + 1).permutation(len(train_idx))]

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte.gz", images[train_idx])
    write_idx(args.out / "train-labels-idx1-ubyte.gz", labels[train_idx])
    write_idx(args.out / "t10k-images-idx3-ubyte.gz", images[test_idx])
    write_idx(args.out / "t10k-labels-idx1-ubyte.gz", labels[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test digits to {args.out}")


if __name__ == "__main__":
    main()
