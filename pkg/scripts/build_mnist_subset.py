"""Convert the digit bundle of the `mnist` npm package into MNIST IDX files.

The npm package (MIT, J. Cazala) ships 10k genuine MNIST digits as JSON arrays
of pixel intensities rounded to three decimals. This script quantizes them back
to bytes and writes a train/test pair of gzipped IDX files, so the toolkit can
run on real MNIST digits in an offline sandbox.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist
"""
import argparse
import gzip
import json
import struct
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        flat = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        imgs = np.rint(np.asarray(flat, dtype=np.float64).reshape(-1, 28, 28) * 255)
        n_test = int(round(len(imgs) * args.test_fraction))
        train_x.append(imgs[:-n_test])
        test_x.append(imgs[-n_test:])
        train_y.append(np.full(len(imgs) - n_test, digit))
        test_y.append(np.full(n_test, digit))

    rng = np.random.Generator(np.random.Philox(args.seed))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, xs, ys in (("train", train_x, train_y), ("t10k", test_x, test_y)):
        x, y = np.concatenate(xs), np.concatenate(ys)
        order = rng.permutation(len(y))
        write_idx(args.out_dir / f"{name}-images-idx3-ubyte.gz", x[order], 0x00000803)
        write_idx(args.out_dir / f"{name}-labels-idx1-ubyte.gz", y[order], 0x00000801)
        print(f"{name}: {len(y)} examples, per class {np.bincount(y).tolist()}")


if __name__ == "__main__":
    main()
