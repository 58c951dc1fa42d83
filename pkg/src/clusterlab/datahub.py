"""Datasets: MNIST IDX files and a seeded synthetic stand-in."""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # samples x width, values in [0, 1]
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.size:
            raise DomainError(f"features {f.shape} and labels {y.shape} do not line up")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DomainError(f"labels outside [0, {self.n_classes})")
        if not np.all(np.isfinite(f)) or (f.size and (f.min() < 0 or f.max() > 1)):
            raise DomainError("features must be finite and lie in [0, 1]")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    @property
    def width(self):
        return self.features.shape[1]

    def subset(self, index):
        return Dataset(self.features[index], self.labels[index], self.n_classes, self.split)

    def of_label(self, label):
        return self.subset(np.flatnonzero(self.labels == label))


def _read_header(data, n_ints, path):
    if len(data) < 4 * n_ints:
        raise FormatError(f"file is {len(data)} bytes, shorter than its header", path)
    return struct.unpack(f">{n_ints}I", data[: 4 * n_ints])


def load_idx(images_path, labels_path, n_classes=10, split="train"):
    """Parse a big-endian IDX image/label pair; pixels are scaled by 1/255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img = images_path.read_bytes()
    lab = labels_path.read_bytes()

    magic, n, rows, cols = _read_header(img, 4, str(images_path))
    if magic != IMAGES_MAGIC:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}", str(images_path))
    payload = n * rows * cols
    if len(img) - 16 != payload:
        raise FormatError(
            f"header promises {n}x{rows}x{cols} = {payload} pixel bytes, found {len(img) - 16}",
            str(images_path),
        )
    magic, n_labels = _read_header(lab, 2, str(labels_path))
    if magic != LABELS_MAGIC:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}", str(labels_path))
    if len(lab) - 8 != n_labels:
        raise FormatError(
            f"header promises {n_labels} labels, found {len(lab) - 8} bytes", str(labels_path)
        )
    if n_labels != n:
        raise FormatError(f"labels file has {n_labels} entries but images file has {n}", str(labels_path))

    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        raise FormatError(f"label {labels.max()} outside [0, {n_classes})", str(labels_path))
    return Dataset(pixels / 255.0, labels, n_classes, split)


def load_mnist_dir(directory, split="train"):
    prefix = "train" if split == "train" else "t10k"
    d = Path(directory)
    return load_idx(d / f"{prefix}-images-idx3-ubyte", d / f"{prefix}-labels-idx1-ubyte", split=split)


_SPLIT_STREAM = {"train": 1, "test": 2}


def synthetic_blobs(n_classes, dim, per_class, seed, split="train", sigma=0.25):
    """Gaussian class clouds in [0, 1]^dim.

    Class means depend only on ``seed``, so train and test draws of the
    same seed share them. The noise scale is shrunk if needed so every pair
    of means is at least 6 sigma apart.
    """
    if min(n_classes, dim, per_class) < 1:
        raise DomainError("n_classes, dim and per_class must all be positive")
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.2, 0.8, size=(n_classes, dim))
    if n_classes > 1:
        gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
        min_gap = gaps[~np.eye(n_classes, dtype=bool)].min()
        sigma = min(sigma, min_gap / 6.0)
    noise = np.random.default_rng([seed, _SPLIT_STREAM.get(split, 3)])
    labels = np.repeat(np.arange(n_classes), per_class)
    x = means[labels] + noise.normal(0.0, sigma, size=(labels.size, dim))
    return Dataset(np.clip(x, 0.0, 1.0), labels, n_classes, split)


def batches(dataset, batch_size, epoch, seed):
    """Index arrays for one epoch, shuffled by (seed, epoch); last batch may be short."""
    if batch_size < 1:
        raise DomainError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    return [order[i : i + batch_size] for i in range(0, len(dataset), batch_size)]
