"""Orthonormal 2-D DCT-II / DCT-III and coefficient masks for frequency filtering."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODES = ("full", "low", "high", "custom")

# low/high corners of a 224 x 224 coefficient grid
REF_SIZE, REF_LOW, REF_HIGH = 224, 32, 192


@lru_cache(maxsize=64)
def dct_matrix(n: int) -> np.ndarray:
    """``n x n`` orthonormal DCT-II matrix; row k is the k-th cosine basis vector."""
    if n < 1:
        raise ValueError(f"DCT size must be >= 1, got {n}")
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct2d(x):
    """DCT over the last two axes (rows then columns).

    Accepts an ndarray or a :class:`Tensor`; a Tensor input stays on the tape.
    """
    H, W = x.shape[-2], x.shape[-1]
    ch, cw = dct_matrix(H), dct_matrix(W)
    if isinstance(x, Tensor):
        return T.matmul(T.matmul(Tensor(ch), x), Tensor(cw.T))
    return ch @ np.asarray(x, dtype=float) @ cw.T


def idct2d(X):
    """Inverse of :func:`dct2d` (orthonormal DCT-III)."""
    H, W = X.shape[-2], X.shape[-1]
    ch, cw = dct_matrix(H), dct_matrix(W)
    if isinstance(X, Tensor):
        return T.matmul(T.matmul(Tensor(ch.T), X), Tensor(cw))
    return ch.T @ np.asarray(X, dtype=float) @ cw


@dataclass(frozen=True)
class FrequencyMask:
    height: int
    width: int
    grid: np.ndarray
    mode: str = "custom"
    corner: int | None = None

    @property
    def is_full(self) -> bool:
        return bool(self.grid.all())

    def count(self) -> int:
        return int(self.grid.sum())

    def __or__(self, other: "FrequencyMask") -> "FrequencyMask":
        return FrequencyMask(self.height, self.width, self.grid | other.grid, "custom")

    def complement(self) -> "FrequencyMask":
        return FrequencyMask(self.height, self.width, ~self.grid, "custom")

    def to_pgm(self, path) -> None:
        write_pgm(path, self.grid.astype(np.uint8) * 255)


def default_corner(mode: str, size: int) -> int:
    """Corner size scaled from the 224-pixel reference filters."""
    ref = REF_LOW if mode == "low" else REF_HIGH
    return int(round(ref / REF_SIZE * size))


def make_mask(H: int, W: int, mode: str = "full", f: int | None = None) -> FrequencyMask:
    """Binary DCT coefficient mask with the DC coefficient at (0, 0).

    ``low`` keeps the top-left ``f x f`` block, ``high`` the bottom-right
    ``f x f`` block; ``f`` defaults to the scaled reference corner.
    """
    if mode not in ("full", "low", "high"):
        raise ValueError(f"unknown mask mode {mode!r}; use full, low, high or custom_mask()")
    grid = np.zeros((H, W), dtype=bool)
    if mode == "full":
        grid[:] = True
        return FrequencyMask(H, W, grid, "full", None)
    if f is None:
        f = default_corner(mode, min(H, W))
    if not 0 <= f <= min(H, W):
        raise ValueError(f"corner size {f} outside [0, {min(H, W)}]")
    if mode == "low":
        grid[:f, :f] = True
    elif f:
        grid[H - f:, W - f:] = True
    return FrequencyMask(H, W, grid, mode, f)


def custom_mask(grid) -> FrequencyMask:
    g = np.asarray(grid, dtype=bool)
    return FrequencyMask(g.shape[0], g.shape[1], g, "custom", None)


def filter_perturbation(delta: np.ndarray, mask: FrequencyMask) -> np.ndarray:
    """Keep only the masked DCT coefficients of ``delta``, per channel."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape[-2:] != (mask.height, mask.width):
        raise ValueError(f"mask extents {(mask.height, mask.width)} do not match "
                         f"perturbation extents {delta.shape[-2:]}")
    if mask.is_full:
        return delta.copy()
    return idct2d(dct2d(delta) * mask.grid)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit PGM (P5)."""
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM images must be 2-D, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = open(path, "rb").read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
