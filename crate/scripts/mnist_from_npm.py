#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package (MIT) into
gzip IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

Each JSON file holds flattened 28x28 images scaled by 1/255 and rounded to
three decimals; round(v * 255) recovers the original byte exactly. Samples are
shuffled with a fixed seed and split 9000 / 1000 into train / t10k files.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for k in range(len(data) // 784):
            px = bytes(int(round(v * 255)) for v in data[k * 784:(k + 1) * 784])
            samples.append((px, digit))
    random.Random(20170000).shuffle(samples)
    splits = {"train": samples[:9000], "t10k": samples[9000:10000]}
    for name, rows in splits.items():
        with gzip.GzipFile(dst / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 2051, len(rows), 28, 28))
            for px, _ in rows:
                f.write(px)
        with gzip.GzipFile(dst / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 2049, len(rows)))
            f.write(bytes(label for _, label in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
