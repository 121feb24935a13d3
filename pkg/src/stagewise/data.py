"""Datasets: seeded synthetic generators and the IDX binary format.

All generators are bitwise deterministic in their seed and return an 80/20
train/test split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import IdxFormatError, ValidationError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray   # (N, d) or (N, C, H, W), float64
    labels: np.ndarray   # (N,), int64
    classes: int
    n_train: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.classes):
            raise ValidationError(
                f"labels outside [0, {self.classes})")
        if not 0 < self.n_train <= self.inputs.shape[0]:
            raise ValidationError(
                f"n_train {self.n_train} invalid for "
                f"{self.inputs.shape[0]} samples")

    @property
    def train(self):
        return self.inputs[:self.n_train], self.labels[:self.n_train]

    @property
    def test(self):
        return self.inputs[self.n_train:], self.labels[self.n_train:]


def _balanced_labels(n, classes, rng):
    y = np.arange(n) % classes
    return y[rng.permutation(n)]


def gen_synthetic(kind: str, n: int, classes: int, seed: int,
                  noise: float = 0.5, separation: float = 6.0) -> Dataset:
    """blobs: Gaussian clusters in 16-d at axis-aligned centers scaled by
    `separation` (cluster std 1). spirals: 2-d interleaved arcs. gridimg:
    one random 1x8x8 template per class plus Gaussian noise of std `noise`.
    """
    if n < 2 * classes:
        raise ValidationError(f"need n >= 2*classes, got n={n} classes={classes}")
    if classes < 2:
        raise ValidationError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng([seed, _KIND_TAGS.get(kind, 0)])
    y = _balanced_labels(n, classes, rng)
    if kind == "blobs":
        d = 16
        centers = np.zeros((classes, d))
        for c in range(classes):
            if c < d:
                centers[c, c] = separation
            else:
                v = rng.normal(size=d)
                centers[c] = separation * v / np.linalg.norm(v)
        x = centers[y] + rng.normal(size=(n, d))
    elif kind == "spirals":
        t = rng.uniform(0.25, 1.0, size=n)
        angle = 2.0 * np.pi * y / classes + t * 3.0 * np.pi
        r = t * separation
        x = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
        x += noise * rng.normal(size=(n, 2))
    elif kind == "gridimg":
        templates = rng.normal(size=(classes, 1, 8, 8))
        x = templates[y] + noise * rng.normal(size=(n, 1, 8, 8))
    else:
        raise ValidationError(f"unknown synthetic kind '{kind}'")
    n_train = int(round(0.8 * n))
    return Dataset(np.ascontiguousarray(x, dtype=np.float64),
                   y.astype(np.int64), classes, n_train)


_KIND_TAGS = {"blobs": 1, "spirals": 2, "gridimg": 3}


def _read_be32(buf, offset, path):
    if offset + 4 > len(buf):
        raise IdxFormatError(f"{path}: truncated header")
    return struct.unpack_from(">i", buf, offset)[0]


def load_idx(images_path, labels_path, holdout: float = 0.2) -> Dataset:
    """Parse big-endian IDX image/label files (unsigned-byte payloads).

    Pixels are scaled to [0, 1] and returned as (N, 1, H, W); the declared
    split keeps the first (1 - holdout) fraction for training.
    """
    with open(images_path, "rb") as f:
        img_buf = f.read()
    magic = _read_be32(img_buf, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic 0x{magic & 0xffffffff:08x}, expected "
            f"0x{IDX_IMAGE_MAGIC:08x}")
    n = _read_be32(img_buf, 4, images_path)
    h = _read_be32(img_buf, 8, images_path)
    w = _read_be32(img_buf, 12, images_path)
    if len(img_buf) - 16 < n * h * w:
        raise IdxFormatError(
            f"{images_path}: truncated pixel data ({len(img_buf) - 16} bytes "
            f"for {n}x{h}x{w})")
    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=n * h * w, offset=16)
    inputs = pixels.astype(np.float64).reshape(n, 1, h, w) / 255.0

    with open(labels_path, "rb") as f:
        lab_buf = f.read()
    magic = _read_be32(lab_buf, 0, labels_path)
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic 0x{magic & 0xffffffff:08x}, expected "
            f"0x{IDX_LABEL_MAGIC:08x}")
    n_labels = _read_be32(lab_buf, 4, labels_path)
    if n_labels != n:
        raise IdxFormatError(
            f"image/label count mismatch: {n} images but {n_labels} labels")
    if len(lab_buf) - 8 < n_labels:
        raise IdxFormatError(f"{labels_path}: truncated label data")
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=n_labels,
                           offset=8).astype(np.int64)
    classes = int(labels.max()) + 1 if n_labels else 0
    n_train = max(1, int(round((1.0 - holdout) * n)))
    return Dataset(inputs, labels, classes, n_train)
