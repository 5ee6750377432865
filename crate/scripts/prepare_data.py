#!/usr/bin/env python3
"""Build the bundled dataset files under data/.

MNIST: the 10000 digits shipped in the `mnist` npm package (v1.1.0,
src/digits/<d>.json, pixel values stored as round(p/255, 3)) are written back
out as standard gzip-compressed IDX files. Digits are interleaved class by
class so that any prefix is roughly class balanced.

Adult: adult.data / adult.test from the UCI repository (as redistributed in the
`responsibly` wheel, responsibly/dataset/adult/) are rewritten as CSV with a
header row, surrounding whitespace stripped and the trailing '.' removed from
test labels.

Usage: prepare_data.py <mnist-package-dir> <adult-dir> <out-data-dir>
"""
import csv
import gzip
import io
import json
import os
import struct
import sys

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num",
    "marital-status", "occupation", "relationship", "race", "sex",
    "capital-gain", "capital-loss", "hours-per-week", "native-country",
    "income",
]


def write_mnist(pkg_dir, out_dir):
    per_class = []
    for digit in range(10):
        with open(os.path.join(pkg_dir, "src", "digits", f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        assert len(flat) % 784 == 0
        per_class.append([flat[i:i + 784] for i in range(0, len(flat), 784)])

    images, labels = [], []
    longest = max(len(c) for c in per_class)
    for j in range(longest):
        for digit, samples in enumerate(per_class):
            if j < len(samples):
                images.append(bytes(int(round(v * 255)) for v in samples[j]))
                labels.append(digit)

    n = len(images)
    os.makedirs(out_dir, exist_ok=True)
    with gzip.GzipFile(os.path.join(out_dir, "digits-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        for img in images:
            f.write(img)
    with gzip.GzipFile(os.path.join(out_dir, "digits-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))
    print(f"mnist: {n} digits")


def write_adult(src_dir, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for src, dst in (("adult.data", "adult-train.csv.gz"), ("adult.test", "adult-test.csv.gz")):
        rows = []
        with open(os.path.join(src_dir, src)) as f:
            for rec in csv.reader(f):
                if len(rec) != len(ADULT_COLUMNS):
                    continue
                rec = [v.strip() for v in rec]
                rec[-1] = rec[-1].rstrip(".")
                rows.append(rec)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ADULT_COLUMNS)
        w.writerows(rows)
        with gzip.GzipFile(os.path.join(out_dir, dst), "wb", mtime=0) as f:
            f.write(buf.getvalue().encode())
        print(f"adult: {dst} {len(rows)} rows")


if __name__ == "__main__":
    mnist_pkg, adult_dir, out = sys.argv[1:4]
    write_mnist(mnist_pkg, os.path.join(out, "mnist"))
    write_adult(adult_dir, os.path.join(out, "adult"))
