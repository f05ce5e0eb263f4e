#!/usr/bin/env python3
"""Rebuild gzipped IDX files from the 10k-digit subset bundled in the npm `mnist` package.

Usage: npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist-10k
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

src, dst = Path(sys.argv[1]), Path(sys.argv[2])
dst.mkdir(parents=True, exist_ok=True)

samples = []
for digit in range(10):
    raw = json.loads((src / f"{digit}.json").read_text())["data"]
    for k in range(len(raw) // 784):
        px = bytes(round(v * 255) for v in raw[k * 784:(k + 1) * 784])
        samples.append((px, digit))

random.Random(0).shuffle(samples)
n = len(samples)
# mtime=0 keeps the archives byte-reproducible
with gzip.GzipFile(dst / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
    f.write(struct.pack(">IIII", 0x803, n, 28, 28))
    for px, _ in samples:
        f.write(px)
with gzip.GzipFile(dst / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
    f.write(struct.pack(">II", 0x801, n))
    f.write(bytes(label for _, label in samples))
print(f"wrote {n} samples to {dst}")
