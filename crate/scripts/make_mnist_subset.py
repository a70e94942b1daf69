#!/usr/bin/env python3
"""Convert the 5000-sample MNIST subset bundled with mlxtend into gzipped IDX files.

Usage: make_mnist_subset.py <mlxtend wheel or mnist_5k.csv.gz> <out dir> [n_train]

The rows are shuffled with a fixed seed and split into a training pool
(first n_train rows, default 1500) and a held-out test set (the rest).
"""
import gzip
import random
import struct
import sys
import zipfile
from pathlib import Path


def read_rows(src: Path):
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = src.read_bytes()
    rows = []
    for line in gzip.decompress(raw).decode().strip().splitlines():
        vals = [int(float(v)) for v in line.split(",")]
        rows.append((bytes(vals[:-1]), vals[-1]))
    return rows


def write_idx(out: Path, name: str, rows):
    n = len(rows)
    images = struct.pack(">IIII", 0x00000803, n, 28, 28) + b"".join(r[0] for r in rows)
    labels = struct.pack(">II", 0x00000801, n) + bytes(r[1] for r in rows)
    # mtime=0 keeps the archives byte-reproducible
    with gzip.GzipFile(out / f"{name}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(images)
    with gzip.GzipFile(out / f"{name}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(labels)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    n_train = int(sys.argv[3]) if len(sys.argv) > 3 else 1500
    rows = read_rows(src)
    assert all(len(r[0]) == 784 for r in rows)
    random.Random(20220101).shuffle(rows)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out, "train", rows[:n_train])
    write_idx(out, "t10k", rows[n_train:])
    print(f"wrote {n_train} train / {len(rows) - n_train} test samples to {out}")


if __name__ == "__main__":
    main()
