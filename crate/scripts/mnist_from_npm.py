#!/usr/bin/env python3
"""Convert the 10,000 MNIST digits shipped in the npm `mnist` package into
gzip-compressed IDX files.

Usage: npm pack mnist && tar xzf mnist-*.tgz && \
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src: Path, dst: Path) -> None:
    samples = []
    for label in range(10):
        flat = json.loads((src / f"{label}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for k in range(len(flat) // 784):
            # Values were stored as round(p / 255, 3); rounding back is lossless.
            pixels = bytes(round(v * 255) for v in flat[k * 784:(k + 1) * 784])
            samples.append((pixels, label))
    random.Random(20190606).shuffle(samples)

    dst.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    with gzip.GzipFile(dst / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with gzip.GzipFile(dst / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in samples))
    print(f"wrote {n} samples to {dst}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
