#!/usr/bin/env python3
"""Build a class-balanced MNIST subset in IDX format from the `mnist` npm package.

The npm package (MIT, github.com/cazala/mnist) ships 10k MNIST digits as JSON
arrays of pixel intensities scaled to [0, 1] with three decimals. This script
rescales them to bytes and writes the standard IDX image/label pair.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_from_npm.py package/src/digits data/mnist --per-class 600
"""
import argparse
import json
import struct
from pathlib import Path


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--per-class", type=int, default=600)
    args = ap.parse_args()

    per_digit = []
    for d in range(10):
        raw = json.loads((args.digits_dir / f"{d}.json").read_text())["data"]
        n = len(raw) // 784
        if n < args.per_class:
            raise SystemExit(f"digit {d}: only {n} samples")
        per_digit.append([raw[i * 784:(i + 1) * 784] for i in range(args.per_class)])

    images = bytearray()
    labels = bytearray()
    # interleave so any prefix stays roughly class balanced
    for i in range(args.per_class):
        for d in range(10):
            images.extend(min(255, max(0, round(v * 255))) for v in per_digit[d][i])
            labels.append(d)

    count = 10 * args.per_class
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "train-images-idx3-ubyte").write_bytes(
        struct.pack(">IIII", 0x00000803, count, 28, 28) + bytes(images))
    (args.out_dir / "train-labels-idx1-ubyte").write_bytes(
        struct.pack(">II", 0x00000801, count) + bytes(labels))
    print(f"wrote {count} samples to {args.out_dir}")


if __name__ == "__main__":
    main()
