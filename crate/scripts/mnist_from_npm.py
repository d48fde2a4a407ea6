"""Rebuild data/mnist/*.gz from the digits bundled in the npm `mnist` package.

Usage: npm pack mnist && tar xzf mnist-1.1.0.tgz
       python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(src, dst, n_test=1000, seed=20240607):
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        rows = np.asarray(flat, dtype=np.float64).reshape(-1, 784)
        images.append(np.rint(rows * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(rows.shape[0], digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    splits = {"train": slice(n_test, None), "t10k": slice(0, n_test)}
    os.makedirs(dst, exist_ok=True)
    for name, sl in splits.items():
        imgs, labs = images[sl], labels[sl]
        write_idx(os.path.join(dst, f"{name}-images-idx3-ubyte.gz"), 0x803,
                  [len(labs), 28, 28], imgs.tobytes())
        write_idx(os.path.join(dst, f"{name}-labels-idx1-ubyte.gz"), 0x801,
                  [len(labs)], labs.tobytes())
        print(name, len(labs), np.bincount(labs, minlength=10))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
