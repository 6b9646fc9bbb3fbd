"""Synthetic datasets, IDX ingestion and seeded mini-batching."""

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803  # 2051
IDX_LABEL_MAGIC = 0x00000801  # 2049


@dataclass
class LabeledDataset:
    points: np.ndarray  # n x d
    labels: np.ndarray  # n ints in [0, class_count)
    class_count: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.labels.shape != (self.points.shape[0],):
            raise ValueError("points must be n x d with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


@dataclass
class UnlabeledDataset:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValueError("need a non-empty n x d point array")

    def __len__(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class ShiftSpec:
    rotation: float = 0.0  # radians, about the origin
    translation: Sequence[float] = (0.0, 0.0)


def moons_points(t, label):
    """Noise-free moon coordinates for angle(s) ``t`` on the given class."""
    t = np.asarray(t, dtype=np.float64)
    if label == 0:
        return np.stack([np.cos(t), np.sin(t)], axis=-1)
    return np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=-1)


def make_moons(n_per_class, noise_std, seed):
    """Two interleaved half circles; class 0 is the upper moon.

    Angles are drawn uniformly on [0, pi] per point, then isotropic Gaussian
    noise of std ``noise_std`` is added. Class 0 rows come first.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    t0 = rng.uniform(0.0, np.pi, n_per_class)
    t1 = rng.uniform(0.0, np.pi, n_per_class)
    points = np.concatenate([moons_points(t0, 0), moons_points(t1, 1)])
    if noise_std > 0:
        points = points + rng.normal(0.0, noise_std, points.shape)
    labels = np.repeat([0, 1], n_per_class)
    return LabeledDataset(points, labels, 2)


def _rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def apply_shift(ds, shift):
    """Rigid motion x -> R(angle) x + translation; labels are kept."""
    points = ds.points
    translation = np.asarray(shift.translation, dtype=np.float64)
    if not (np.isfinite(shift.rotation) and np.all(np.isfinite(translation))):
        raise ValueError("shift must be finite")
    if translation.shape != (points.shape[1],):
        raise ValueError(f"translation must have {points.shape[1]} components")
    if shift.rotation != 0.0:
        if points.shape[1] != 2:
            raise ValueError("rotation is only defined for 2-D data")
        points = points @ _rotation(shift.rotation).T
    if np.any(translation != 0.0):
        points = points + translation
    if isinstance(ds, LabeledDataset):
        return LabeledDataset(points.copy(), ds.labels.copy(), ds.class_count)
    return UnlabeledDataset(points.copy())


def inverse_shift(shift):
    """The ShiftSpec undoing ``shift``."""
    back = -_rotation(-shift.rotation) @ np.asarray(shift.translation, dtype=np.float64)
    return ShiftSpec(-shift.rotation, tuple(back))


def gaussian_blobs(centers, std, n_per_class, seed):
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.shape[0] == 0 or centers.size == 0:
        raise ValueError("need at least one center")
    if std < 0:
        raise ValueError("std must be non-negative")
    rng = np.random.default_rng(seed)
    k, d = centers.shape
    points = np.repeat(centers, n_per_class, axis=0)
    if std > 0:
        points = points + rng.normal(0.0, std, (k * n_per_class, d))
    return LabeledDataset(points, np.repeat(np.arange(k), n_per_class), k)


class IdxFormatError(ValueError):
    pass


class WrongMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


def _read_idx(path, magic, ndims):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedPayloadError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise WrongMagicError(f"{path}: wrong magic 0x{got:08x}, expected 0x{magic:08x}")
    header_len = 4 + 4 * ndims
    if len(raw) < header_len:
        raise TruncatedPayloadError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndims}I", raw[4:header_len])
    size = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < size:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header promises {size}")
    return np.frombuffer(payload, dtype=np.uint8, count=size).reshape(dims)


def load_idx(images_path, labels_path):
    """Read an IDX image/label file pair; pixels scaled to [0, 1] and flattened."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    points = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    return LabeledDataset(points, labels, int(labels.max()) + 1 if labels.size else 1)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">4I", IDX_IMAGE_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABEL_MAGIC, labels.size) + labels.tobytes())


def minibatches(n, batch_size, epoch_seed) -> List[np.ndarray]:
    """Shuffle range(n) with a seeded Fisher-Yates and cut contiguous slices."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def export_csv(ds, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        labels = ds.labels if isinstance(ds, LabeledDataset) else [""] * len(ds)
        for row, lab in zip(ds.points, labels):
            w.writerow([f"{float(v):.17g}" for v in row] + [lab])
