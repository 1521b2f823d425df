import gzip
import struct

import numpy as np
import pytest

from advlens.data import (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, DataError, Dataset, load_cifar10_binary,
                          load_dataset, load_mnist_idx, synthetic_dataset, write_cifar10_binary,
                          write_idx)


@pytest.fixture
def mnist_files(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (2, 28, 28), dtype=np.uint8)
    labels = np.array([3, 7], dtype=np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", imgs, IDX_IMAGES_MAGIC)
    write_idx(tmp_path / "train-labels-idx1-ubyte", labels, IDX_LABELS_MAGIC)
    return tmp_path, imgs, labels


def test_mnist_idx_parse(mnist_files):
    d, imgs, labels = mnist_files
    ds = load_mnist_idx(d / "train-images-idx3-ubyte")
    assert len(ds) == 2 and ds.shape == (1, 28, 28) and ds.provenance == "mnist"
    np.testing.assert_array_equal(ds.images[:, 0], imgs / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)


def test_mnist_gzip(mnist_files):
    d, imgs, _ = mnist_files
    for name in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"):
        (d / f"{name}.gz").write_bytes(gzip.compress((d / name).read_bytes()))
    ds = load_dataset("mnist_idx", d / "train-images-idx3-ubyte.gz",
                      labels_path=d / "train-labels-idx1-ubyte.gz")
    np.testing.assert_array_equal(ds.images[:, 0], imgs / 255.0)


def test_mnist_wrong_magic_names_offset(tmp_path):
    (tmp_path / "x").write_bytes(struct.pack(">IIII", 2049, 1, 2, 2) + bytes(4))
    with pytest.raises(DataError, match="byte 0"):
        load_mnist_idx(tmp_path / "x", tmp_path / "x")


def test_mnist_truncated_header_and_payload(tmp_path, mnist_files):
    (tmp_path / "h").write_bytes(struct.pack(">II", 2051, 2))
    with pytest.raises(DataError, match="header at byte 8"):
        load_mnist_idx(tmp_path / "h", tmp_path / "h")
    d, _, _ = mnist_files
    raw = (d / "train-images-idx3-ubyte").read_bytes()
    (tmp_path / "p").write_bytes(raw[:-10])
    with pytest.raises(DataError, match="payload at byte"):
        load_mnist_idx(tmp_path / "p", d / "train-labels-idx1-ubyte")


def test_mnist_header_checked_before_payload(tmp_path):
    # a huge declared size with a wrong magic must fail on the magic, not on reading
    (tmp_path / "x").write_bytes(struct.pack(">IIII", 1234, 10**6, 28, 28))
    with pytest.raises(DataError, match="magic"):
        load_mnist_idx(tmp_path / "x", tmp_path / "x")


def test_mnist_count_mismatch(tmp_path, mnist_files):
    d, _, _ = mnist_files
    write_idx(tmp_path / "l", np.array([1, 2, 3], dtype=np.uint8), IDX_LABELS_MAGIC)
    with pytest.raises(DataError, match="3 labels for 2 images"):
        load_mnist_idx(d / "train-images-idx3-ubyte", tmp_path / "l")


def test_cifar_batch(tmp_path):
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, (10000, 3, 32, 32), dtype=np.uint8)
    labels = rng.integers(0, 10, 10000)
    write_cifar10_binary(tmp_path / "data_batch_1.bin", imgs, labels)
    ds = load_cifar10_binary(tmp_path / "data_batch_1.bin", expected=10000)
    assert len(ds) == 10000 and ds.shape == (3, 32, 32)
    np.testing.assert_array_equal(ds.images[17], imgs[17] / 255.0)  # channel-planar records
    np.testing.assert_array_equal(ds.labels, labels)


def test_cifar_errors(tmp_path):
    imgs = np.zeros((3, 3, 32, 32), dtype=np.uint8)
    write_cifar10_binary(tmp_path / "b", imgs, [1, 2, 3])
    raw = (tmp_path / "b").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-5])
    with pytest.raises(DataError, match="byte 6146"):
        load_cifar10_binary(tmp_path / "t")
    with pytest.raises(DataError, match="expected 5 records"):
        load_cifar10_binary(tmp_path / "b", expected=5)
    bad = bytearray(raw)
    bad[3073] = 12
    (tmp_path / "l").write_bytes(bytes(bad))
    with pytest.raises(DataError, match="byte 3073"):
        load_cifar10_binary(tmp_path / "l")


def test_synthetic_deterministic_and_split_independent():
    a, b = synthetic_dataset(seed=7), synthetic_dataset(seed=7)
    assert a.checksum == b.checksum
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert synthetic_dataset(seed=7, split="test").checksum != a.checksum
    assert synthetic_dataset(seed=8).checksum != a.checksum
    c = synthetic_dataset(seed=1, num_classes=4, n=50, channels=1, size=12)
    assert c.images.shape == (50, 1, 12, 12) and c.labels.max() < 4
    assert c.images.min() >= 0 and c.images.max() <= 1


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0))
    with pytest.raises(DataError):
        Dataset(np.full((1, 1, 2, 2), 1.5), [0])
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 1, 2, 2)), [10], num_classes=10)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1, 2, 2)), [0])


def test_sample_is_seeded_and_bounded():
    ds = synthetic_dataset(0, n=100, size=8)
    s1, i1 = ds.sample(20, 3)
    s2, i2 = ds.sample(20, 3)
    assert np.array_equal(i1, i2) and s1.checksum == s2.checksum
    assert np.all(np.diff(i1) > 0)
    assert not np.array_equal(ds.sample(20, 4)[1], i1)
    with pytest.raises(DataError):
        ds.sample(101, 0)


def test_unknown_source():
    with pytest.raises(DataError, match="unknown dataset source"):
        load_dataset("imagenet")
