#!/usr/bin/env python3
"""Build the fixed desk-scale MNIST subset used by the acceptance suite.

Source: the `mnist` npm package (10000 real MNIST digits stored as JSON,
pixel values = byte / 255 rounded to three decimals). The bytes are recovered
exactly with round(v * 255) and written as standard IDX files:

    data/mnist-desk/{train,val,test}-images-idx3-ubyte
    data/mnist-desk/{train,val,test}-labels-idx1-ubyte

Sizes: 5000 train, 1000 validation, 1000 test, all disjoint. The ordering is
fixed by sorting on the SHA-256 of each image's bytes, so the subset does not
depend on any RNG implementation.

Usage:
    python3 scripts/mnist_desk_subset.py [path/to/mnist-1.1.0.tgz]

Without an argument the script runs `npm pack mnist@1.1.0` in a temp dir.
"""
import hashlib
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile

SIZES = (("train", 5000), ("val", 1000), ("test", 1000))
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUT = os.path.join(ROOT, "data", "mnist-desk")


def fetch_tarball(tmp):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                   stdout=subprocess.DEVNULL)
    return os.path.join(tmp, "mnist-1.1.0.tgz")


def load_digits(tgz):
    samples = []
    with tarfile.open(tgz) as tar:
        for label in range(10):
            raw = tar.extractfile(f"package/src/digits/{label}.json").read()
            values = json.loads(raw)["data"]
            assert len(values) % 784 == 0
            for start in range(0, len(values), 784):
                pixels = bytes(round(v * 255) for v in values[start:start + 784])
                samples.append((label, pixels))
    return samples


def write_idx(prefix, samples):
    with open(prefix + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for _, pixels in samples:
            f.write(pixels)
    with open(prefix + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for label, _ in samples))


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tgz = sys.argv[1] if len(sys.argv) > 1 else fetch_tarball(tmp)
        samples = load_digits(tgz)
    samples.sort(key=lambda s: hashlib.sha256(bytes([s[0]]) + s[1]).digest())
    os.makedirs(OUT, exist_ok=True)
    start = 0
    for name, size in SIZES:
        part = samples[start:start + size]
        start += size
        write_idx(os.path.join(OUT, name), part)
        counts = [sum(1 for s in part if s[0] == k) for k in range(10)]
        print(f"{name}: {len(part)} samples, per-class {counts}")


if __name__ == "__main__":
    main()
