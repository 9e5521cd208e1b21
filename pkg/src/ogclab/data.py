"""Dataset sources: seeded synthetic generators and an IDX reader."""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def make_blobs(n: int, n_classes: int = 2, overlap: float = 1.0, seed: int = 0, n_features: int = 2):
    """Isotropic Gaussian blobs with centers evenly spaced on the unit circle.

    ``overlap`` is the per-coordinate standard deviation; larger values mix
    the classes more.  Labels are balanced (round robin).
    """
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, n_features))
    centers[:, 0] = np.cos(angles)
    if n_features > 1:
        centers[:, 1] = np.sin(angles)
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    X = centers[y] + overlap * rng.standard_normal((n, n_features))
    return X, y.astype(np.int64)


def make_moons(n: int, noise: float = 0.1, seed: int = 0):
    """Two interleaved half circles."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    rng.shuffle(y)
    t = np.pi * rng.random(n)
    X = np.where(
        (y == 0)[:, None],
        np.column_stack([np.cos(t), np.sin(t)]),
        np.column_stack([1 - np.cos(t), 0.5 - np.sin(t)]),
    )
    X = X + noise * rng.standard_normal((n, 2))
    return X, y.astype(np.int64)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an integer array of its stored shape."""
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxFormatError("file too short for a magic number", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise IdxFormatError(f"bad magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError("truncated dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    count = int(np.prod(dims))
    if len(data) < header_end + count:
        raise IdxFormatError(f"truncated payload: expected {count} bytes", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx_pair(images_path, labels_path):
    """Images flattened to rows of [0, 1] floats, labels as int64."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"image file has {images.ndim} dims, expected 3", 3)
    if labels.ndim != 1:
        raise IdxFormatError(f"label file has {labels.ndim} dims, expected 1", 3)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return X, labels.astype(np.int64)


def write_idx(path, array) -> None:
    """Write a uint8 array (1-D labels or 3-D images) as IDX."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(a.ndim)
    if magic is None:
        raise ValueError("only 1-D label and 3-D image arrays are supported")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def load_dataset(source: str, n: int = 1000, n_classes: int = 2, overlap: float = 1.0, seed: int = 0,
                 n_features: int = 2, images: str | None = None, labels: str | None = None):
    """Dispatch on ``source`` in {"blobs", "moons", "idx"}; returns (X, y)."""
    if source == "blobs":
        return make_blobs(n, n_classes, overlap, seed, n_features)
    if source == "moons":
        return make_moons(n, overlap, seed)
    if source == "idx":
        if not images or not labels:
            raise ValueError("idx source needs image and label paths")
        for p in (images, labels):
            if not Path(p).exists():
                raise FileNotFoundError(p)
        return load_idx_pair(images, labels)
    raise ValueError(f"unknown dataset source {source!r}")
