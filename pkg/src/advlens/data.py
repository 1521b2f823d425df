"""Dataset loaders: MNIST IDX, CIFAR-10 binary batches and seeded Gaussian-blob images."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 3073
SOURCES = ("mnist_idx", "cifar10_binary", "synthetic")


class DataError(ValueError):
    """Malformed or inconsistent dataset file."""


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W, float64 in [0, 1]
    labels: np.ndarray  # N, int64
    split: str = "train"
    provenance: str = "synthetic"
    num_classes: int = 10
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise DataError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes})")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DataError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.provenance,
                       self.num_classes, {**self.meta, "subset_of": len(self)})

    def sample(self, n: int, seed: int) -> tuple["Dataset", np.ndarray]:
        """Deterministic subset of ``n`` examples by seeded shuffle; returns indices too."""
        if n > len(self):
            raise DataError(f"requested {n} samples from a dataset of {len(self)}")
        idx = np.sort(np.random.default_rng([seed, 0x5A4D]).permutation(len(self))[:n])
        return self.subset(idx), idx


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, expect_magic: int, ndims: int) -> np.ndarray:
    with _open(path) as fh:
        head = fh.read(4 + 4 * ndims)
        if len(head) < 4 + 4 * ndims:
            raise DataError(f"{path}: truncated IDX header at byte {len(head)}")
        (magic,) = struct.unpack(">I", head[:4])
        if magic != expect_magic:
            raise DataError(f"{path}: bad IDX magic {magic} at byte 0, expected {expect_magic}")
        dims = struct.unpack(f">{ndims}I", head[4:])
        count = int(np.prod(dims))
        payload = fh.read(count)
    if len(payload) < count:
        raise DataError(f"{path}: truncated IDX payload at byte {len(head) + len(payload)}, "
                        f"expected {count} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path=None, split: str = "train") -> Dataset:
    images_path = Path(images_path)
    if labels_path is None:
        labels_path = images_path.with_name(images_path.name.replace("images-idx3", "labels-idx1"))
    imgs = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(labels) != len(imgs):
        raise DataError(f"{labels_path}: {len(labels)} labels for {len(imgs)} images (byte 4)")
    return Dataset(imgs[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), split,
                   "mnist", 10, {"path": str(images_path)})


def load_cifar10_binary(paths, split: str = "train", expected: int | None = None) -> Dataset:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % CIFAR_RECORD:
            whole = len(raw) // CIFAR_RECORD
            raise DataError(f"{p}: truncated record {whole} at byte {whole * CIFAR_RECORD} "
                            f"({len(raw)} bytes is not a multiple of {CIFAR_RECORD})")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0]
        if lab.size and lab.max() > 9:
            bad = int(np.argmax(lab > 9))
            raise DataError(f"{p}: label {lab[bad]} out of range at byte {bad * CIFAR_RECORD}")
        labels.append(lab.astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    n = sum(len(l) for l in labels)
    if expected is not None and n != expected:
        raise DataError(f"expected {expected} records, found {n} (byte {n * CIFAR_RECORD})")
    return Dataset(np.concatenate(images), np.concatenate(labels), split, "cifar10", 10,
                   {"paths": [str(p) for p in paths]})


def synthetic_dataset(seed: int = 0, num_classes: int = 10, n: int = 1000, channels: int = 3,
                      size: int = 32, split: str = "train", blob_amplitude: float = 0.3,
                      blob_width: float | None = None, texture_amplitude: float = 0.05,
                      noise: float = 0.1, blob_flip: float = 0.0) -> Dataset:
    """Seeded Gaussian-blob classes.

    Each class owns a spatial Gaussian bump with a signed colour, plus a faint
    pixel-level +-1 texture.  ``blob_flip`` is the probability that an image
    carries another class's bump.  Class prototypes depend only on ``seed``;
    the split name selects an independent draw of examples.
    """
    proto = np.random.default_rng([seed, 0])
    width = blob_width if blob_width is not None else size / 6
    # centres evenly spaced on a ring so every pair of classes is spatially separated
    angles = proto.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(num_classes) / num_classes
    centers = (size - 1) / 2 + 0.3 * size * np.stack([np.sin(angles), np.cos(angles)], axis=1)
    colours = proto.choice([-1.0, 1.0], (num_classes, channels))
    textures = proto.choice([-1.0, 1.0], (num_classes, channels, size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    bumps = np.exp(-((yy[None] - centers[:, 0, None, None]) ** 2
                     + (xx[None] - centers[:, 1, None, None]) ** 2) / (2 * width ** 2))
    patterns = colours[:, :, None, None] * bumps[:, None]

    split_key = int.from_bytes(hashlib.sha256(split.encode()).digest()[:4], "little")
    rng = np.random.default_rng([seed, 1, split_key])
    labels = rng.integers(0, num_classes, n)
    blob_cls = labels.copy()
    if blob_flip > 0 and num_classes > 1:
        flip = rng.random(n) < blob_flip
        shift = rng.integers(1, num_classes, n)
        blob_cls[flip] = (labels[flip] + shift[flip]) % num_classes
    x = (0.5 + blob_amplitude * patterns[blob_cls] + texture_amplitude * textures[labels]
         + noise * rng.standard_normal((n, channels, size, size)))
    return Dataset(np.clip(x, 0.0, 1.0), labels, split, "synthetic", num_classes,
                   {"seed": seed, "blob_amplitude": blob_amplitude, "texture_amplitude": texture_amplitude,
                    "noise": noise, "blob_flip": blob_flip})


def load_dataset(source: str, path=None, split: str = "train", **kwargs) -> Dataset:
    """Dispatch on ``source``: ``mnist_idx``, ``cifar10_binary`` or ``synthetic``."""
    if source == "mnist_idx":
        return load_mnist_idx(path, kwargs.get("labels_path"), split)
    if source == "cifar10_binary":
        return load_cifar10_binary(path, split, kwargs.get("expected"))
    if source == "synthetic":
        return synthetic_dataset(split=split, **kwargs)
    raise DataError(f"unknown dataset source {source!r}; expected one of {SOURCES}")


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 IDX file (used for fixtures and exports)."""
    arr = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def write_cifar10_binary(path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    imgs = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], imgs], axis=1)
    Path(path).write_bytes(rec.tobytes())
