"""Convert the per-digit JSON dumps shipped by the `mnist` npm package into
gzip IDX files with the standard MNIST names.

    python3 scripts/prepare_mnist.py /path/to/mnist/src/digits data/mnist

Each ``<digit>.json`` holds ``{"data": [...]}``, a flat run of 28x28 images
with intensities in [0, 1].  The pooled images are shuffled with a fixed seed
and split into train and t10k files.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from dcwp.data import MNIST_FILES, write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test-size", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        imgs = flat.reshape(-1, 28, 28)
        images.append(np.rint(imgs * 255).clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    images, labels = np.concatenate(images), np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(images))
    images, labels = images[order], labels[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    cut = len(images) - args.test_size
    for split, sl in (("train", slice(0, cut)), ("test", slice(cut, None))):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(args.out_dir / f"{img_name}.gz", images[sl])
        write_idx(args.out_dir / f"{lbl_name}.gz", labels[sl])
        print(f"{split}: {len(images[sl])} images -> {args.out_dir}")


if __name__ == "__main__":
    main()
