"""Labeled image datasets and the packed "DIMG" container.

Images are uint8 arrays of shape (H, W, C) with C in {1, 3}; a dataset keeps
all images stacked in one (N, H, W, C) array plus an int label vector.  The
on-disk container is a fixed 16-byte header followed by uniform records of
``label (u16 LE) + raw pixels``, so the file size is exactly
``16 + count * (2 + H*W*C)`` bytes and any record can be located by index
arithmetic alone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import SeededRng

MAGIC = b"DIMG"
VERSION = 1
HEADER_SIZE = 16
# magic, version u8, count u32, height u16, width u16, channels u8,
# num_classes u16 -- 16 bytes total, little endian throughout.
_HEADER = struct.Struct("<4sBIHHBH")


class DecodeError(ValueError):
    """Raised when a packed dataset file cannot be decoded."""


@dataclass
class LabeledDataset:
    """In-memory dataset: stacked uint8 images plus integer labels.

    Args:
        images: uint8 array of shape (N, H, W, C), C in {1, 3}.
        labels: integer array of shape (N,), each in [0, num_classes).
        num_classes: number of classes, >= 1.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8:
            raise ValueError(f"images must be uint8, got {self.images.dtype}")
        if self.images.ndim != 4:
            raise ValueError(f"images must have shape (N, H, W, C), got {self.images.shape}")
        n, h, w, c = self.images.shape
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")
        if n > 0 and (h < 1 or w < 1):
            raise ValueError(f"image dims must be positive, got {h}x{w}")
        if self.labels.shape != (n,):
            raise ValueError(f"labels shape {self.labels.shape} does not match {n} images")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if n > 0:
            bad = np.where((self.labels < 0) | (self.labels >= self.num_classes))[0]
            if bad.size:
                raise ValueError(
                    f"label {int(self.labels[bad[0]])} at index {int(bad[0])} "
                    f"outside [0, {self.num_classes})"
                )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def save_packed(ds: LabeledDataset, path: str | Path) -> int:
    """Write a dataset to the packed container. Returns bytes written."""
    n, h, w, c = ds.images.shape
    header = _HEADER.pack(MAGIC, VERSION, n, h, w, c, ds.num_classes)
    rec = np.dtype([("label", "<u2"), ("pixels", "u1", (h * w * c,))])
    body = np.zeros(n, dtype=rec)
    body["label"] = ds.labels.astype(np.uint16)
    body["pixels"] = ds.images.reshape(n, h * w * c)
    raw = header + body.tobytes()
    Path(path).write_bytes(raw)
    return len(raw)


def load_packed(path: str | Path) -> LabeledDataset:
    """Read a packed container back into a LabeledDataset.

    Raises DecodeError on a bad magic, truncated payload, or any label at or
    above the declared class count (the message names the record index).
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise DecodeError(f"file too short for header: {len(raw)} bytes")
    magic, version, count, h, w, c, num_classes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DecodeError(f"unsupported version {version}")
    if c not in (1, 3):
        raise DecodeError(f"channels must be 1 or 3, got {c}")
    if num_classes < 1:
        raise DecodeError(f"num_classes must be >= 1, got {num_classes}")
    rec_size = 2 + h * w * c
    expect = HEADER_SIZE + count * rec_size
    if len(raw) != expect:
        raise DecodeError(f"expected {expect} bytes for {count} records, got {len(raw)}")
    if count == 0:
        return LabeledDataset(
            np.zeros((0, h, w, c), dtype=np.uint8), np.zeros(0, dtype=np.int64), num_classes
        )
    rec = np.dtype([("label", "<u2"), ("pixels", "u1", (h * w * c,))])
    body = np.frombuffer(raw, dtype=rec, count=count, offset=HEADER_SIZE)
    labels = body["label"].astype(np.int64)
    bad = np.where(labels >= num_classes)[0]
    if bad.size:
        raise DecodeError(
            f"record {int(bad[0])}: label {int(labels[bad[0]])} outside [0, {num_classes})"
        )
    images = body["pixels"].reshape(count, h, w, c).copy()
    return LabeledDataset(images, labels, num_classes)


def split(
    ds: LabeledDataset, fractions: tuple[float, float], rng: SeededRng
) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic two-way split.

    The first part receives floor(len * fractions[0]) samples chosen by a
    seeded permutation; indices are re-sorted inside each part so a (1.0, 0.0)
    split returns the dataset unchanged.
    """
    f_a, f_b = float(fractions[0]), float(fractions[1])
    for f in (f_a, f_b):
        if f < 0.0 or f > 1.0:
            raise ValueError(f"fraction {f} outside [0, 1]")
    if abs(f_a + f_b - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {f_a + f_b}")
    n = len(ds)
    n_a = int(np.floor(n * f_a))
    perm = rng.permutation(n)
    idx_a = np.sort(perm[:n_a])
    idx_b = np.sort(perm[n_a:])

    def take(idx: np.ndarray) -> LabeledDataset:
        return LabeledDataset(ds.images[idx], ds.labels[idx], ds.num_classes)

    return take(idx_a), take(idx_b)
