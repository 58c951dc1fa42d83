import struct

import numpy as np
import pytest

from clusterlab.datahub import Dataset, batches, load_idx, load_mnist_dir, synthetic_blobs
from clusterlab.errors import DomainError, FormatError


def write_idx(tmp_path, pixels, labels, image_magic=0x803, label_magic=0x801, n_images=None, n_labels=None):
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    img = tmp_path / "images"
    lab = tmp_path / "labels"
    img.write_bytes(struct.pack(">4I", image_magic, n if n_images is None else n_images, rows, cols) + pixels.tobytes())
    count = labels.size if n_labels is None else n_labels
    lab.write_bytes(struct.pack(">2I", label_magic, count) + labels.tobytes())
    return img, lab


def test_idx_parse(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(12, 28, 28))
    pixels[0, 0, 0] = 255
    labels = rng.integers(0, 10, size=12)
    ds = load_idx(*write_idx(tmp_path, pixels, labels))
    assert ds.features.shape == (12, 784)
    assert ds.features[0, 0] == 1.0
    np.testing.assert_array_equal(ds.features, pixels.reshape(12, 784) / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)


def test_idx_header_width_10000(tmp_path):
    ds = load_idx(*write_idx(tmp_path, np.zeros((10000, 28, 28)), np.zeros(10000)))
    assert len(ds) == 10000 and ds.width == 784


def test_idx_short_labels_names_both_counts(tmp_path):
    img, lab = write_idx(tmp_path, np.zeros((5, 28, 28)), np.zeros(3))
    with pytest.raises(FormatError) as err:
        load_idx(img, lab)
    assert "3" in str(err.value) and "5" in str(err.value)


def test_idx_bad_magic(tmp_path):
    with pytest.raises(FormatError, match="magic"):
        load_idx(*write_idx(tmp_path, np.zeros((2, 28, 28)), np.zeros(2), image_magic=0x801))
    with pytest.raises(FormatError, match="magic"):
        load_idx(*write_idx(tmp_path, np.zeros((2, 28, 28)), np.zeros(2), label_magic=0x803))


def test_idx_truncated_payload(tmp_path):
    img, lab = write_idx(tmp_path, np.zeros((4, 28, 28)), np.zeros(4))
    img.write_bytes(img.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_idx(img, lab)
    img.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_idx(img, lab)


def test_idx_label_out_of_range(tmp_path):
    with pytest.raises(FormatError):
        load_idx(*write_idx(tmp_path, np.zeros((2, 28, 28)), [1, 12]))


def test_mnist_dir_names(tmp_path):
    img, lab = write_idx(tmp_path, np.zeros((3, 28, 28)), [0, 1, 2])
    img.rename(tmp_path / "t10k-images-idx3-ubyte")
    lab.rename(tmp_path / "t10k-labels-idx1-ubyte")
    ds = load_mnist_dir(tmp_path, split="test")
    assert ds.split == "test" and len(ds) == 3


def test_dataset_validation():
    with pytest.raises(DomainError):
        Dataset(np.full((2, 3), 1.5), [0, 1], 2)
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 3)), [0, 2], 2)
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 3)), [0], 2)


def test_synthetic_shape_and_balance():
    ds = synthetic_blobs(10, 784, 100, seed=0)
    assert ds.features.shape == (1000, 784)
    assert np.bincount(ds.labels).tolist() == [100] * 10
    assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0


def test_synthetic_nearest_centroid_separable():
    train = synthetic_blobs(10, 784, 100, seed=5, split="train")
    held = synthetic_blobs(10, 784, 100, seed=5, split="test")
    centroids = np.stack([train.features[train.labels == c].mean(axis=0) for c in range(10)])
    d = ((held.features[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    assert np.mean(d.argmin(axis=1) == held.labels) >= 0.99


def test_synthetic_determinism():
    a = synthetic_blobs(3, 8, 5, seed=7)
    b = synthetic_blobs(3, 8, 5, seed=7)
    assert a.features.tobytes() == b.features.tobytes()
    assert not np.array_equal(a.features, synthetic_blobs(3, 8, 5, seed=8).features)


def test_batches_arithmetic_and_permutation():
    ds = synthetic_blobs(10, 4, 100, seed=0)
    epoch0 = batches(ds, 64, epoch=0, seed=3)
    assert len(epoch0) == 16 and len(epoch0[-1]) == 40
    assert sorted(np.concatenate(epoch0).tolist()) == list(range(1000))
    epoch1 = batches(ds, 64, epoch=1, seed=3)
    assert not np.array_equal(np.concatenate(epoch0), np.concatenate(epoch1))
    again = batches(ds, 64, epoch=1, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(epoch1, again))
    with pytest.raises(DomainError):
        batches(ds, 0, 0, 0)
