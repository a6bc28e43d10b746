import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from orthotrain import linalg
from orthotrain.data import (MNIST_FILES, load_mnist, load_mnist_idx, read_idx, synth_dataset, write_idx)
from orthotrain.errors import ConfigError, FormatError, TruncatedFileError

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist10k"


def raw_idx(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def test_hand_crafted_label_fixture(tmp_path):
    (tmp_path / "lab").write_bytes(raw_idx(0x801, [3], [7, 2, 1]))
    (tmp_path / "img").write_bytes(raw_idx(0x803, [3, 2, 2], [0] * 12))
    x, y = load_mnist_idx(tmp_path / "img", tmp_path / "lab")
    assert list(y) == [7, 2, 1] and y.dtype == np.int64
    assert x.shape == (3, 4) and not x.any()


def test_gzip_fixture(tmp_path):
    (tmp_path / "img.gz").write_bytes(gzip.compress(raw_idx(0x803, [1, 1, 3], [0, 51, 255])))
    assert np.array_equal(read_idx(tmp_path / "img.gz", 0x803), [[[0, 51, 255]]])


@settings(max_examples=25, deadline=None)
@given(shape=st.lists(st.integers(1, 5), min_size=1, max_size=3), seed=st.integers(0, 1000), gz=st.booleans())
def test_write_read_round_trip(tmp_path_factory, shape, seed, gz):
    data = np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)
    path = tmp_path_factory.mktemp("idx") / ("a.gz" if gz else "a")
    write_idx(path, data)
    back = read_idx(path)
    assert back.dtype == np.uint8 and np.array_equal(back, data)


def test_gzip_output_is_byte_stable(tmp_path):
    data = np.arange(30, dtype=np.uint8).reshape(5, 6)
    write_idx(tmp_path / "a.gz", data)
    write_idx(tmp_path / "b.gz", data)
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()


def test_wrong_magic(tmp_path):
    (tmp_path / "lab").write_bytes(raw_idx(0x803, [1, 1, 1], [0]))
    with pytest.raises(FormatError):
        read_idx(tmp_path / "lab", 0x801)


@pytest.mark.parametrize("cut", [2, 6, 10])
def test_truncated_file(tmp_path, cut):
    full = raw_idx(0x803, [2, 2, 2], range(8))
    (tmp_path / "img").write_bytes(full[:-cut] if cut < len(full) else full[:2])
    with pytest.raises(TruncatedFileError):
        read_idx(tmp_path / "img", 0x803)
    assert issubclass(TruncatedFileError, OSError)


def test_truncated_gzip(tmp_path):
    blob = gzip.compress(raw_idx(0x801, [50], range(50)))
    (tmp_path / "lab.gz").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(TruncatedFileError):
        read_idx(tmp_path / "lab.gz")


def test_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", np.zeros((2, 2, 2), np.uint8))
    write_idx(tmp_path / "lab", np.zeros(3, np.uint8))
    with pytest.raises(FormatError):
        load_mnist_idx(tmp_path / "img", tmp_path / "lab")


def test_writer_rejects_non_bytes(tmp_path):
    with pytest.raises(FormatError):
        write_idx(tmp_path / "x", np.zeros(3))


def test_bundled_mnist_subset():
    data = load_mnist(MNIST_DIR)
    assert data.x_train.shape == (8000, 784) and data.x_test.shape == (2000, 784)
    assert data.x_train.min() >= 0.0 and data.x_train.max() <= 1.0
    assert set(np.unique(data.y_train)) == set(range(10))
    limited = load_mnist(MNIST_DIR, train_limit=100, test_limit=50)
    assert len(limited.y_train) == 100 and len(limited.y_test) == 50
    assert np.array_equal(limited.x_train, data.x_train[:100])


def test_missing_mnist_file(tmp_path):
    with pytest.raises(FileNotFoundError, match=MNIST_FILES["train_images"]):
        load_mnist(tmp_path)


def test_noiseless_blobs_nearest_centroid():
    data = synth_dataset("blobs", 400, 0.0, linalg.RngState(1))
    centroids = np.stack([data.x_train[data.y_train == k].mean(axis=0) for k in range(data.num_classes)])
    pred = np.argmin(((data.x_test[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(pred, data.y_test)


def test_synthetic_determinism_and_split():
    a = synth_dataset("two_rings", 200, 0.1, linalg.RngState(3))
    b = synth_dataset("two_rings", 200, 0.1, linalg.RngState(3))
    assert np.array_equal(a.x_train, b.x_train) and np.array_equal(a.y_test, b.y_test)
    assert len(a.y_train) == 160 and len(a.y_test) == 40
    rows = {tuple(r) for r in a.x_train}
    assert not any(tuple(r) in rows for r in a.x_test)
    assert a.y_train.min() >= 0 and a.y_train.max() < a.num_classes


def test_two_rings_not_linearly_separable():
    data = synth_dataset("two_rings", 2000, 0.05, linalg.RngState(4))
    clf = LogisticRegression(max_iter=5000).fit(data.x_train, data.y_train)
    assert clf.score(data.x_train, data.y_train) < 0.75
    assert clf.score(data.x_test, data.y_test) < 0.75


def test_synthetic_errors():
    with pytest.raises(ConfigError):
        synth_dataset("blobs", 5, 0.1, linalg.RngState(0))
    with pytest.raises(ConfigError):
        synth_dataset("spirals", 50, 0.1, linalg.RngState(0))
