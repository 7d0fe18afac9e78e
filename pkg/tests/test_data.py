import gzip
import struct

import numpy as np
import pytest

from robustnets.data import (Dataset, IdxFormatError, IdxLengthError, add_uniform_noise, load_idx_images,
                             load_idx_labels, load_mnist, mnist_available, read_csv, shuffle_batches,
                             synth_blobs, write_csv, write_idx_images, write_idx_labels)
from robustnets.train import one_hot


def _raw_images(path, n, rows, cols, pixels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        fh.write(bytes(pixels))


def test_image_fixture(tmp_path):
    path = tmp_path / "img"
    _raw_images(path, 1, 2, 2, [0, 128, 255, 64])
    x = load_idx_images(path)
    np.testing.assert_array_equal(x, [[0.0], [128 / 255], [1.0], [64 / 255]])
    assert x.dtype == np.float64


def test_two_images_are_columns(tmp_path):
    path = tmp_path / "img"
    _raw_images(path, 2, 1, 3, [1, 2, 3, 4, 5, 6])
    np.testing.assert_array_equal(load_idx_images(path) * 255, [[1, 4], [2, 5], [3, 6]])


def test_empty_image_file(tmp_path):
    path = tmp_path / "img"
    _raw_images(path, 0, 28, 28, [])
    assert load_idx_images(path).shape == (784, 0)


def test_label_fixture(tmp_path):
    path = tmp_path / "lab"
    path.write_bytes(struct.pack(">II", 0x00000801, 3) + bytes([7, 0, 3]))
    np.testing.assert_array_equal(load_idx_labels(path), [7, 0, 3])
    path.write_bytes(struct.pack(">II", 0x00000801, 0))
    assert load_idx_labels(path).size == 0


def test_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(struct.pack(">II", 0x00000803, 1) + b"\x00")
    with pytest.raises(IdxFormatError):
        load_idx_labels(path)
    _raw_images(path, 2, 2, 2, [1, 2, 3])
    with pytest.raises(IdxLengthError):
        load_idx_images(path)
    path.write_bytes(b"\x00\x00")
    with pytest.raises(IdxLengthError):
        load_idx_labels(path)


def test_gzip_and_writers_roundtrip(tmp_path, rng):
    images = rng.integers(0, 256, (3, 4, 5), dtype=np.uint8)
    write_idx_images(tmp_path / "i", images)
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "i.gz").write_bytes(gzip.compress(raw))
    expected = images.reshape(3, 20).T / 255.0
    np.testing.assert_array_equal(load_idx_images(tmp_path / "i.gz"), expected)
    write_idx_labels(tmp_path / "l", [1, 2, 9])
    np.testing.assert_array_equal(load_idx_labels(tmp_path / "l"), [1, 2, 9])


def test_mnist_directory(tmp_path, rng):
    assert not mnist_available(tmp_path)
    for prefix, n in (("train", 5), ("t10k", 3)):
        write_idx_images(tmp_path / f"{prefix}-images-idx3-ubyte", rng.integers(0, 256, (n, 28, 28)))
        write_idx_labels(tmp_path / f"{prefix}-labels-idx1-ubyte", rng.integers(0, 10, n))
    assert mnist_available(tmp_path)
    train, test = load_mnist(tmp_path)
    assert train.features.shape == (784, 5) and len(test) == 3


def test_blobs_linearly_separable():
    ds = synth_blobs(2, 5, 200, separation=10.0, seed=0)
    X = np.vstack([ds.features, np.ones((1, len(ds)))])
    y = 2.0 * ds.labels - 1.0
    w = np.linalg.lstsq(X.T, y, rcond=None)[0]
    assert np.mean(np.sign(w @ X) == y) >= 0.99


def test_blob_centres_far_apart():
    for classes, d in ((10, 784), (5, 2)):
        ds = synth_blobs(classes, d, 400, separation=10.0, seed=1)
        centres = np.array([ds.features[:, ds.labels == c].mean(axis=1) for c in range(classes)])
        dist = np.linalg.norm(centres[:, None] - centres[None], axis=-1)
        # sample means sit within a few std/sqrt(400) of the true centres
        assert dist[np.triu_indices(classes, 1)].min() >= 10.0 - 6 * np.sqrt(d / 400)


def test_blobs_empty_and_deterministic():
    assert len(synth_blobs(3, 4, 0)) == 0
    a, b = synth_blobs(3, 4, 5, seed=2), synth_blobs(3, 4, 5, seed=2)
    assert a.features.tobytes() == b.features.tobytes()
    with pytest.raises(ValueError):
        synth_blobs(2, 2, 2, separation=0.0)


def test_shuffle_batches(rng):
    ds = Dataset(rng.standard_normal((3, 10)), np.arange(10) % 4)
    single = shuffle_batches(ds, 64, seed=0)
    assert len(single) == 1 and single[0][0].shape == (3, 10)
    batches = shuffle_batches(ds, 3, seed=5)
    assert [b[0].shape[1] for b in batches] == [3, 3, 3, 1]
    cols = np.hstack([b[0] for b in batches])
    order = np.lexsort(cols)
    np.testing.assert_array_equal(cols[:, order], ds.features[:, np.lexsort(ds.features)])
    labels = np.concatenate([np.argmax(b[1], axis=0) for b in batches])
    assert sorted(labels) == sorted(ds.labels)
    again = shuffle_batches(ds, 3, seed=5)
    assert all(a[0].tobytes() == b[0].tobytes() for a, b in zip(batches, again))
    with pytest.raises(ValueError):
        shuffle_batches(ds, 0)


def test_uniform_noise(rng):
    x = rng.random((4, 6))
    np.testing.assert_array_equal(add_uniform_noise(x, 0.0, seed=1), x)
    eps = 200 / 255
    y = add_uniform_noise(x, eps, seed=1)
    assert np.all(np.abs(y - x) <= eps)
    assert (y > 1).any() or (y < 0).any()
    np.testing.assert_array_equal(y, add_uniform_noise(x, eps, seed=1))
    with pytest.raises(ValueError):
        add_uniform_noise(x, -1.0)


def test_csv_roundtrip(tmp_path):
    path = tmp_path / "h.csv"
    write_csv(path, ("epoch", "mean_loss"), [])
    assert path.read_bytes() == b"epoch,mean_loss\n"
    values = [(0, 0.1), (1, 1 / 3), (2, 2.5e-17)]
    write_csv(path, ("epoch", "mean_loss"), values)
    header, rows = read_csv(path)
    assert header == ["epoch", "mean_loss"]
    np.testing.assert_array_equal(rows, values)
    assert b"\r" not in path.read_bytes()
    assert "0.33333333333333331" in path.read_text()
    with pytest.raises(ValueError):
        write_csv(path, ("a", "b"), [(1, 2, 3)])
    with pytest.raises(OSError):
        write_csv(tmp_path / "missing" / "x.csv", ("a",), [])


def test_dataset_checks_lengths():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.zeros(2))
    assert one_hot(Dataset(np.zeros((2, 3)), np.array([0, 1, 2])).labels, 3).shape == (3, 3)
