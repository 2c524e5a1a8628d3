#!/usr/bin/env python3
"""Generate the offline MNIST-style digit set as IDX files.

Upsamples the 8x8 scikit-learn digit glyphs to 28x28, applies seeded
elastic warps, affine jitter, and intensity variation, and writes the four
standard IDX files (train/t10k x images/labels). Even-indexed base glyphs
feed the train split and odd-indexed ones the test split, so no glyph
appears in both while the two splits share the same handwriting styles.

Usage:
    python scripts/make_synthetic_mnist.py --out data --train 10000 --test 10000
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from manidp import data as dt


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data", help="output directory (default: data)")
    parser.add_argument("--train", type=int, default=10_000, help="training images")
    parser.add_argument("--test", type=int, default=10_000, help="test images")
    parser.add_argument("--seed", type=int, default=0, help="generator seed")
    args = parser.parse_args()

    paths = dt.ensure_digits_idx(
        args.out, n_train=args.train, n_test=args.test, seed=args.seed
    )
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
