#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist) ships ~10k real MNIST
digits as per-class JSON arrays of normalized pixels. This script shuffles
them with a fixed seed and writes gzipped IDX files:

    <out>/train-images-idx3-ubyte.gz, <out>/train-labels-idx1-ubyte.gz
    <out>/t10k-images-idx3-ubyte.gz,  <out>/t10k-labels-idx1-ubyte.gz

Usage:
    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/desk_mnist_from_npm.py package data/mnist-desk
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TEST_COUNT = 1000


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        raw = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for i in range(len(raw) // 784):
            px = bytes(max(0, min(255, round(v * 255))) for v in raw[i * 784:(i + 1) * 784])
            samples.append((px, digit))
    random.Random(0).shuffle(samples)
    splits = {"train": samples[:-TEST_COUNT], "t10k": samples[-TEST_COUNT:]}
    for name, rows in splits.items():
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [len(rows), 28, 28],
                  b"".join(px for px, _ in rows))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [len(rows)],
                  bytes(lbl for _, lbl in rows))
        print(f"{name}: {len(rows)} samples")


if __name__ == "__main__":
    main()
