"""Convert the 10,000 MNIST digits shipped in the npm ``mnist`` package to IDX.

The package stores one JSON file per class (``src/digits/<k>.json``) holding a
flat ``data`` array of pixel intensities ``x / 255`` rounded to three
decimals. Intensities are mapped back to bytes with ``round(v * 255)`` and the
samples are split per class into 80% train / 20% test with a seeded shuffle.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/convert_npm_digits.py package/src/digits data/mnist10k
"""

import json
import sys
from pathlib import Path

import numpy as np

from orthotrain.data import MNIST_FILES, write_idx
from orthotrain.linalg import RngState


def main(src, dst, seed=0):
    src, dst = Path(src), Path(dst)
    rng = RngState(seed=seed)
    parts = {"train": ([], []), "test": ([], [])}
    for digit in range(10):
        flat = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"], dtype=np.float64)
        images = np.clip(np.rint(flat * 255.0), 0, 255).astype(np.uint8).reshape(-1, 28, 28)
        order = np.argsort(rng.uniform(len(images)), kind="stable")
        n_train = int(round(0.8 * len(images)))
        for name, idx in (("train", order[:n_train]), ("test", order[n_train:])):
            parts[name][0].append(images[idx])
            parts[name][1].append(np.full(len(idx), digit, dtype=np.uint8))
    dst.mkdir(parents=True, exist_ok=True)
    for name in ("train", "test"):
        images = np.concatenate(parts[name][0])
        labels = np.concatenate(parts[name][1])
        mix = np.argsort(rng.uniform(len(labels)), kind="stable")
        write_idx(dst / (MNIST_FILES[f"{name}_images"] + ".gz"), images[mix])
        write_idx(dst / (MNIST_FILES[f"{name}_labels"] + ".gz"), labels[mix])
        print(f"{name}: {len(labels)} samples")


if __name__ == "__main__":
    main(*sys.argv[1:3])
