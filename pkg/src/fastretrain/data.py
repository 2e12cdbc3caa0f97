"""Datasets: IDX and CSV loaders, seeded synthetic generators, batching."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import BadMagicError, CountMismatchError, DataFormatError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_SHUFFLE_STREAM = 0x53485546


@dataclass
class Dataset:
    features: np.ndarray  # (N, *input_shape), values in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.features.shape[0] != self.labels.shape[0]:
            raise CountMismatchError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self), self.num_classes))
        out[np.arange(len(self)), self.labels] = 1.0
        return out

    def subset(self, n: int | None, name: str | None = None) -> Dataset:
        """First ``n`` samples (all when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return Dataset(self.features[:n], self.labels[:n], self.num_classes, name or self.name)


# IDX -------------------------------------------------------------------------


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, kind: str) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x} for {kind}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = math.prod(dims)
    if len(raw) - head < need:
        raise TruncatedFileError(f"{path}: expected {need} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=head).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, name: str = "idx") -> Dataset:
    """Load an IDX image/label pair (plain or ``.gz``); pixels are scaled by 1/255.

    Images come back as ``(N, 1, H, W)``.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    y = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(x, y, k, name)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(N, H, W)`` and labels ``(N,)`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">3I", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC))
        f.write(struct.pack(">I", labels.shape[0]))
        f.write(labels.tobytes())


# CSV -------------------------------------------------------------------------


def load_csv(path, num_classes: int | None = None, name: str | None = None) -> Dataset:
    """Load a CSV with a header row and a ``label`` column; other columns are features.

    Features already inside [0, 1] are kept as-is; otherwise the whole matrix is
    min-max scaled with one global range (so pixel-like columns keep their
    relative scale).
    """
    with _open_text(path) as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty CSV") from None
        header = [h.strip() for h in header]
        if "label" not in header:
            raise DataFormatError(f"{path}: no 'label' column in header")
        li = header.index("label")
        rows = [r for r in reader if r]
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    try:
        table = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric cell ({exc})") from None
    if table.shape[1] != len(header):
        raise DataFormatError(f"{path}: rows have {table.shape[1]} cells, header has {len(header)}")
    y = table[:, li]
    if not np.all(y == np.round(y)) or y.min() < 0:
        raise DataFormatError(f"{path}: labels must be non-negative integers")
    x = np.delete(table, li, axis=1)
    x = _unit_range(x)
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(x, y.astype(np.int64), k, name or Path(path).stem)


def _open_text(path):
    path = Path(path)
    return gzip.open(path, "rt", newline="") if path.suffix == ".gz" else open(path, newline="")


def save_csv(ds: Dataset, path) -> None:
    x = ds.features.reshape(len(ds), -1)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
        for row, label in zip(x, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def _unit_range(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if lo >= 0.0 and hi <= 1.0:
        return x
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


# synthetic -------------------------------------------------------------------


def _points(kind: str, n_per_class: int, num_classes: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    labels = np.repeat(np.arange(num_classes), n_per_class)
    if kind == "blobs":
        ang = 2 * np.pi * np.arange(num_classes) / num_classes
        centers = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        pts = centers[labels] + noise * rng.standard_normal((labels.size, 2))
    elif kind == "spirals":
        t = np.tile(np.linspace(0.0, 1.0, n_per_class, endpoint=False), num_classes)
        r = 0.1 + 0.9 * t
        theta = 2 * np.pi * t + 2 * np.pi * labels / num_classes
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        pts = pts + noise * rng.standard_normal(pts.shape)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}; use 'blobs' or 'spirals'")
    return pts, labels


def _render(pts: np.ndarray, shape: tuple[int, int, int], width: float = 0.12) -> np.ndarray:
    """Draw each 2-D point (in the unit square) as a Gaussian bump on a grid."""
    c, h, w = shape
    ys = np.linspace(0.0, 1.0, h)[None, :, None]
    xs = np.linspace(0.0, 1.0, w)[None, None, :]
    img = np.exp(-((xs - pts[:, 0, None, None]) ** 2 + (ys - pts[:, 1, None, None]) ** 2) / (2 * width**2))
    return np.repeat(img[:, None], c, axis=1)


def gen_synthetic(
    kind: str,
    n_per_class: int,
    num_classes: int,
    noise: float,
    seed: int,
    image_shape: tuple[int, int, int] | None = None,
) -> Dataset:
    """Seeded ``blobs`` (Gaussian clusters on a circle) or ``spirals`` (interleaved arms).

    Coordinates are min-max scaled into [0, 1]. With ``image_shape = (C, H, W)``
    every point is rendered as a Gaussian bump at its location, which gives a
    conv-friendly dataset with the same class structure.
    """
    if n_per_class < 1 or num_classes < 1:
        raise ValueError("n_per_class and num_classes must be >= 1")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    pts, labels = _points(kind, n_per_class, num_classes, noise, rng)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pts = (pts - lo) / span
    x = pts if image_shape is None else _render(pts, tuple(image_shape))
    return Dataset(x, labels, num_classes, kind)


# batching --------------------------------------------------------------------


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch), _SHUFFLE_STREAM]).permutation(n)


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled ``(features, labels)`` mini-batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_permutation(len(ds), seed, epoch)
    for lo in range(0, len(ds), batch_size):
        idx = order[lo : lo + batch_size]
        yield ds.features[idx], ds.labels[idx]
