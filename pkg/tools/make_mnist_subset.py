"""Build the bundled MNIST subset as IDX files.

Source: a directory with one JSON file per digit class (``0.json`` ..
``9.json``), each holding a flat ``data`` array of pixel intensities in
[0, 1] at 784 values per image (the layout shipped by the ``mnist`` npm
package, which bundles 10000 genuine MNIST digits). Pixels are recovered to
their original u8 values and written in the canonical IDX layout, split
class-stratified into train and test files.

Usage:
    python3 tools/make_mnist_subset.py --source DIR --out data/mnist \
        [--test-count 2000] [--seed 0]
"""

import argparse
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dynsparse.data import write_idx_images, write_idx_labels  # noqa: E402


def load_class(path):
    with open(path, encoding="utf-8") as fh:
        flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
    if flat.size % 784:
        raise ValueError(f"{path}: size {flat.size} is not a multiple of 784")
    images = np.round(flat * 255.0).astype(np.uint8).reshape(-1, 28, 28)
    recovered = images.reshape(-1).astype(np.float64) / 255.0
    err = np.abs(recovered - flat).max()
    if err > 0.5 / 255.0:
        raise ValueError(f"{path}: pixel recovery error {err} too large")
    return images


def stratified_split(per_class_counts, test_total, rng):
    """Per-class test counts by largest remainder, summing to test_total."""
    total = sum(per_class_counts)
    exact = [c * test_total / total for c in per_class_counts]
    base = [int(x) for x in exact]
    remainders = sorted(range(len(exact)),
                        key=lambda i: (exact[i] - base[i], i), reverse=True)
    short = test_total - sum(base)
    for i in remainders[:short]:
        base[i] += 1
    return base


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--source", required=True,
                    help="directory of per-class JSON files")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--test-count", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    classes = [load_class(os.path.join(args.source, f"{d}.json"))
               for d in range(10)]
    counts = [len(c) for c in classes]
    test_counts = stratified_split(counts, args.test_count, rng)

    train_x, train_y, test_x, test_y = [], [], [], []
    for digit, (images, n_test) in enumerate(zip(classes, test_counts)):
        order = rng.permutation(len(images))
        test_idx, train_idx = order[:n_test], order[n_test:]
        test_x.append(images[test_idx])
        test_y.append(np.full(len(test_idx), digit, dtype=np.uint8))
        train_x.append(images[train_idx])
        train_y.append(np.full(len(train_idx), digit, dtype=np.uint8))

    def shuffled(xs, ys):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(len(y))
        return x[order], y[order]

    train_x, train_y = shuffled(train_x, train_y)
    test_x, test_y = shuffled(test_x, test_y)

    os.makedirs(args.out, exist_ok=True)
    write_idx_images(os.path.join(args.out, "train-images.idx"), train_x)
    write_idx_labels(os.path.join(args.out, "train-labels.idx"), train_y)
    write_idx_images(os.path.join(args.out, "test-images.idx"), test_x)
    write_idx_labels(os.path.join(args.out, "test-labels.idx"), test_y)
    print(f"wrote {len(train_y)} train / {len(test_y)} test images to {args.out}")
    print("class counts (train):", np.bincount(train_y, minlength=10).tolist())
    print("class counts (test): ", np.bincount(test_y, minlength=10).tolist())


if __name__ == "__main__":
    main()
