#!/usr/bin/env python3
"""Fetch MNIST digits as IDX files.

Tries the official training files first. When they are unreachable, falls
back to the 5000-image MNIST subset bundled with the `mlxtend` wheel (500
training images per digit, in label order).

    python3 scripts/fetch_mnist.py --out data/mnist
    python3 scripts/fetch_mnist.py --fixture crates/cli/tests/data

`--fixture` writes the small test fixture instead: the first 100 images of
digit 3 plus the first 10 of every other digit.
"""

import argparse
import gzip
import io
import pathlib
import struct
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]
FILES = ["train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"]


def write_idx(out_dir, images, labels, prefix):
    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    with open(out_dir / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(out_dir / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(labels))


def try_official(out_dir):
    for base in MIRRORS:
        try:
            blobs = [gzip.decompress(urllib.request.urlopen(base + name, timeout=20).read()) for name in FILES]
        except Exception as exc:  # noqa: BLE001
            print(f"{base}: {exc}", file=sys.stderr)
            continue
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train-images-idx3-ubyte").write_bytes(blobs[0])
        (out_dir / "train-labels-idx1-ubyte").write_bytes(blobs[1])
        return True
    return False


def mlxtend_subset():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps", "-q", "-d", tmp],
            check=True,
        )
        wheel = next(pathlib.Path(tmp).glob("mlxtend-*.whl"))
        raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = gzip.decompress(raw).decode().splitlines()
    images, labels = [], []
    for row in rows:
        vals = [int(float(v)) for v in row.split(",")]
        images.append(vals[:-1])
        labels.append(vals[-1])
    return images, labels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=pathlib.Path)
    ap.add_argument("--fixture", type=pathlib.Path)
    args = ap.parse_args()
    if args.fixture:
        images, labels = mlxtend_subset()
        keep, seen = [], {}
        for i, lab in enumerate(labels):
            quota = 100 if lab == 3 else 10
            if seen.get(lab, 0) < quota:
                seen[lab] = seen.get(lab, 0) + 1
                keep.append(i)
        write_idx(args.fixture, [images[i] for i in keep], [labels[i] for i in keep], "mnist-subset")
        print(f"wrote {len(keep)} images to {args.fixture}")
        return
    if not args.out:
        ap.error("--out or --fixture is required")
    if try_official(args.out):
        print(f"wrote official training set to {args.out}")
        return
    images, labels = mlxtend_subset()
    write_idx(args.out, images, labels, "train")
    print(f"official mirrors unreachable; wrote the 5000-image subset to {args.out}")


if __name__ == "__main__":
    main()
