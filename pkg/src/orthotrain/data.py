"""Datasets: IDX (MNIST) reading/writing and seeded synthetic problems."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import linalg
from .errors import ConfigError, FormatError, TruncatedFileError
from .io_utils import atomic_write_bytes

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    name: str
    num_classes: int

    @property
    def n_features(self):
        return self.x_train.shape[1]


def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        try:
            raw = gzip.decompress(raw)
        except (EOFError, gzip.BadGzipFile) as exc:
            raise TruncatedFileError(f"{path}: corrupt or truncated gzip stream") from exc
    return raw


def read_idx(path, expected_magic=None):
    """Parse an unsigned-byte IDX file into a ``uint8`` array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file shorter than the IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: unsupported IDX element type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - header_len < count:
        raise TruncatedFileError(f"{path}: expected {count} data bytes, found {len(raw) - header_len}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_len).reshape(dims)


def write_idx(path, array):
    """Write a ``uint8`` array as IDX (gzip-compressed if ``path`` ends in ``.gz``)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError("IDX writer only supports uint8 data")
    magic = 0x00000800 | array.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    atomic_write_bytes(path, payload)


def load_mnist_idx(images_path, labels_path):
    """Images as float rows scaled to [0, 1] and integer labels."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def _find(directory, stem):
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{directory}: missing {stem}[.gz]")


def load_mnist(directory, train_limit=0, test_limit=0):
    directory = Path(directory)
    x_tr, y_tr = load_mnist_idx(_find(directory, MNIST_FILES["train_images"]), _find(directory, MNIST_FILES["train_labels"]))
    x_te, y_te = load_mnist_idx(_find(directory, MNIST_FILES["test_images"]), _find(directory, MNIST_FILES["test_labels"]))
    if train_limit:
        x_tr, y_tr = x_tr[:train_limit], y_tr[:train_limit]
    if test_limit:
        x_te, y_te = x_te[:test_limit], y_te[:test_limit]
    return Dataset(x_tr, y_tr, x_te, y_te, name="mnist", num_classes=10)


def write_mnist_fixture(directory, n_train=60, n_test=20, rng=None, side=28):
    """Tiny MNIST-format IDX set (gzip) for tests: class ``k`` lights up row band ``k``."""
    directory = Path(directory)
    rng = rng if rng is not None else linalg.RngState(0)
    band = max(1, side // 10)
    for split, n in (("train", n_train), ("test", n_test)):
        labels = (np.arange(n) % 10).astype(np.uint8)
        noise = rng.uniform(n * side * side).reshape(n, side, side)
        images = (60.0 * noise).astype(np.uint8)
        for i, k in enumerate(labels):
            images[i, k * band:(k + 1) * band] = 255
        write_idx(directory / (MNIST_FILES[f"{split}_images"] + ".gz"), images)
        write_idx(directory / (MNIST_FILES[f"{split}_labels"] + ".gz"), labels)
    return directory


def _split(x, y, rng, name, num_classes, train_fraction=0.8):
    order = np.argsort(rng.uniform(len(y)), kind="stable")
    n_train = int(round(train_fraction * len(y)))
    tr, te = order[:n_train], order[n_train:]
    return Dataset(x[tr], y[tr], x[te], y[te], name=name, num_classes=num_classes)


def synth_dataset(kind, n, noise, rng, features=32, classes=4):
    """Seeded synthetic classification data with an 80/20 train/test split.

    ``blobs``: ``classes`` Gaussian clusters around centers drawn from
    ``N(0, 4 I)``. ``two_rings``: two concentric annuli (radii 1 and 2) in the
    first two coordinates, embedded in ``features`` dimensions by a random
    rotation; class 0 is the inner ring.
    """
    if n < 10:
        raise ConfigError("synthetic datasets need n >= 10")
    if kind == "blobs":
        centers = linalg.rand_gaussian(classes, features, 0.0, 2.0, rng)
        y = np.arange(n) % classes
        x = centers[y]
        if noise > 0:
            x = x + linalg.rand_gaussian(n, features, 0.0, noise, rng)
        return _split(x, y, rng, "blobs", classes)
    if kind == "two_rings":
        if features < 2:
            raise ConfigError("two_rings needs at least two features")
        y = np.arange(n) % 2
        angle = 2.0 * np.pi * rng.uniform(n)
        radius = 1.0 + y.astype(np.float64)
        if noise > 0:
            radius = radius + noise * rng.normal(n)
        plane = np.zeros((n, features))
        plane[:, 0] = radius * np.cos(angle)
        plane[:, 1] = radius * np.sin(angle)
        rot = linalg.rand_orthogonal(features, rng)
        return _split(plane @ rot.T, y, rng, "two_rings", 2)
    raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
