"""Dataset ingestion, synthetic fallback data, batching and CSV output."""

import csv
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .train import one_hot

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    """Bad magic number or header."""


class IdxLengthError(ValueError):
    """Payload shorter than the header promises."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.features.shape[1] != self.labels.size:
            raise ValueError(
                f"{self.features.shape[1]} feature columns but {self.labels.size} labels"
            )

    def __len__(self):
        return self.labels.size


def _read_bytes(path):
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_header(raw, magic, n_dims):
    need = 4 * (1 + n_dims)
    if len(raw) < need:
        raise IdxLengthError(f"header truncated ({len(raw)} bytes)")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IdxFormatError(f"magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{n_dims}I", raw[4:need]), need


def load_idx_images(path):
    """Images as a ``(rows*cols) x N`` float64 matrix scaled to [0, 1]."""
    raw = _read_bytes(path)
    (n, rows, cols), offset = _parse_header(raw, IMAGE_MAGIC, 3)
    size = n * rows * cols
    if len(raw) - offset < size:
        raise IdxLengthError(f"expected {size} pixel bytes, found {len(raw) - offset}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=size, offset=offset)
    return pixels.reshape(n, rows * cols).T.astype(np.float64) / 255.0


def load_idx_labels(path):
    raw = _read_bytes(path)
    (n,), offset = _parse_header(raw, LABEL_MAGIC, 1)
    if len(raw) - offset < n:
        raise IdxLengthError(f"expected {n} label bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset).astype(np.int64)


def _resolve(data_dir, stem):
    for candidate in (stem, stem + ".gz"):
        path = os.path.join(data_dir, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"{stem}[.gz] not found in {data_dir}")


def mnist_available(data_dir):
    if not data_dir:
        return False
    try:
        for stem in MNIST_FILES.values():
            _resolve(data_dir, stem)
    except FileNotFoundError:
        return False
    return True


def load_mnist(data_dir):
    """``(train, test)`` datasets from the four standard IDX files."""
    f = {k: _resolve(data_dir, v) for k, v in MNIST_FILES.items()}
    train = Dataset(load_idx_images(f["train_images"]), load_idx_labels(f["train_labels"]), "mnist-train")
    test = Dataset(load_idx_images(f["test_images"]), load_idx_labels(f["test_labels"]), "mnist-test")
    return train, test


def write_idx_images(path, images):
    """Write ``N x rows x cols`` uint8 images (used for fixtures)."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.size))
        fh.write(labels.tobytes())


def synth_blobs(classes, d, per_class, separation=10.0, seed=0):
    """Unit-variance Gaussian blobs whose centres are pairwise ``separation`` apart.

    Centres sit at ``separation / sqrt(2)`` times distinct coordinate axes
    (when ``classes <= d``), after a seeded random rotation.
    """
    if not separation > 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    if classes <= d:
        basis, _ = np.linalg.qr(rng.standard_normal((d, classes)))
        centres = basis * (separation / np.sqrt(2.0))
    else:
        centres = _spread_centres(rng, classes, d, separation)
    labels = np.repeat(np.arange(classes), per_class)
    features = centres[:, labels] + rng.standard_normal((d, labels.size))
    return Dataset(features, labels, f"blobs-{classes}x{d}")


def _spread_centres(rng, classes, d, separation):
    radius = separation * classes
    centres = []
    while len(centres) < classes:
        c = rng.uniform(-radius, radius, size=d)
        if all(np.linalg.norm(c - o) >= separation for o in centres):
            centres.append(c)
    return np.array(centres).T


def split(ds, fraction, seed=0):
    """Seeded random split into two datasets (first gets ``fraction``)."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(fraction * len(ds)))
    a, b = perm[:cut], perm[cut:]
    return (Dataset(ds.features[:, a], ds.labels[a], ds.name),
            Dataset(ds.features[:, b], ds.labels[b], ds.name))


def shuffle_batches(ds, batch, seed=0, classes=None):
    """Seeded permutation of columns split into ``(x, onehot)`` batches."""
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    classes = classes or (int(ds.labels.max()) + 1 if len(ds) else 1)
    perm = np.random.default_rng(seed).permutation(len(ds))
    out = []
    for start in range(0, len(ds), batch):
        idx = perm[start:start + batch]
        out.append((ds.features[:, idx], one_hot(ds.labels[idx], classes)))
    return out


def add_uniform_noise(x, eps, seed=0):
    """``x + eps * U[-1, 1]`` elementwise, no clamping."""
    if eps < 0:
        raise ValueError("noise magnitude must be >= 0")
    rng = np.random.default_rng(seed)
    return x + eps * (2.0 * rng.random(np.shape(x)) - 1.0)


def fmt(value):
    return f"{value:.17g}" if isinstance(value, float) else str(value)


def write_csv(path, header, rows):
    """Comma-separated values with 17 significant digits and LF endings."""
    header = list(header)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            row = list(row)
            if len(row) != len(header):
                raise ValueError(f"row width {len(row)} != header width {len(header)}")
            writer.writerow(fmt(float(v)) if isinstance(v, (float, np.floating)) else fmt(v) for v in row)


def read_csv(path):
    """Header and float rows of a CSV written by ``write_csv``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.array(rows).reshape(-1, len(header))
