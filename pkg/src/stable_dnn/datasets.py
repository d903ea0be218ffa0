"""Benchmark data: concentric ellipses, swiss roll, peaks, and MNIST (IDX files)."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed or inconsistent IDX file."""


@dataclass
class LabeledSet:
    Y0: np.ndarray
    C: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.Y0 = np.asarray(self.Y0, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        if len(self.Y0) != len(self.C):
            raise ValueError(f"{len(self.Y0)} feature rows but {len(self.C)} label rows")
        if not self.names:
            self.names = list(range(self.C.shape[1]))

    def __len__(self):
        return len(self.Y0)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.C, axis=1)

    @property
    def n_features(self) -> int:
        return self.Y0.shape[1]

    @property
    def n_classes(self) -> int:
        return self.C.shape[1]

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.Y0[idx], self.C[idx], list(self.names))

    def to_csv(self, path) -> None:
        n = self.n_features
        header = ",".join([f"x{i + 1}" for i in range(n)] + ["class"])
        data = np.column_stack([self.Y0, self.labels])
        fmt = ["%.17g"] * n + ["%d"]
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)


def one_hot(labels, n_classes: Optional[int] = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    m = int(labels.max()) + 1 if n_classes is None else n_classes
    C = np.zeros((len(labels), m))
    C[np.arange(len(labels)), labels] = 1.0
    return C


def duplicate_features(data: LabeledSet, width: int) -> LabeledSet:
    """Widen features to ``width`` columns by cyclically repeating them."""
    n = data.n_features
    if width < n:
        raise ValueError(f"cannot shrink {n} features to {width}")
    cols = np.arange(width) % n
    return LabeledSet(data.Y0[:, cols], data.C, list(data.names))


def _split(Y, labels, train_idx, val_idx, m):
    C = one_hot(labels, m)
    return LabeledSet(Y[train_idx], C[train_idx]), LabeledSet(Y[val_idx], C[val_idx])


def gen_ellipses(seed: int = 0, n_per_class: int = 600, inner=(1.0, 0.5), outer=(2.0, 1.0),
                 jitter: float = 0.05, n_train: int = 1000):
    """Two concentric noisy ellipses, randomly split into training/validation."""
    rng = np.random.default_rng(seed)
    pts, labels = [], []
    for k, (a, b) in enumerate((inner, outer)):
        theta = rng.uniform(0.0, 2 * np.pi, n_per_class)
        r = 1.0 + jitter * rng.standard_normal(n_per_class)
        pts.append(np.column_stack([a * r * np.cos(theta), b * r * np.sin(theta)]))
        labels.append(np.full(n_per_class, k))
    Y, lab = np.vstack(pts), np.concatenate(labels)
    perm = rng.permutation(len(Y))
    return _split(Y, lab, perm[:n_train], perm[n_train:], 2)


def gen_swiss_roll(seed: int = 0, n_points: int = 513):
    """Two interleaved spirals; every other point along each curve is held out.

    The seed is accepted for interface uniformity; the data are deterministic.
    """
    theta = np.linspace(0.0, 4 * np.pi, n_points)
    r = theta / (4 * np.pi)
    direction = np.column_stack([np.cos(theta), np.sin(theta)])
    curves = [r[:, None] * direction, (r + 0.2)[:, None] * direction]
    Y = np.vstack(curves)
    lab = np.repeat([0, 1], n_points)
    pos = np.tile(np.arange(n_points), 2)
    return _split(Y, lab, np.flatnonzero(pos % 2 == 0), np.flatnonzero(pos % 2 == 1), 2)


def peaks(x1, x2):
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    return (3 * (1 - x1) ** 2 * np.exp(-x1 ** 2 - (x2 + 1) ** 2)
            - 10 * (x1 / 5 - x1 ** 3 - x2 ** 5) * np.exp(-x1 ** 2 - x2 ** 2)
            - np.exp(-(x1 + 1) ** 2 - x2 ** 2) / 3)


def peaks_grid(resolution: int = 256):
    g = np.linspace(-3.0, 3.0, resolution)
    X1, X2 = np.meshgrid(g, g)
    points = np.column_stack([X1.ravel(), X2.ravel()])
    return points, peaks(points[:, 0], points[:, 1])


def peaks_thresholds(resolution: int = 256, n_classes: int = 5) -> np.ndarray:
    """Interior quantiles of the peaks values on the grid (equal-volume classes)."""
    _, f = peaks_grid(resolution)
    return np.quantile(f, np.arange(1, n_classes) / n_classes)


def gen_peaks(seed: int = 0, resolution: int = 256, n_classes: int = 5, n_per_class: int = 1000,
              val_fraction: float = 0.2):
    """Grid points of the peaks function binned into equal-volume classes."""
    rng = np.random.default_rng(seed)
    points, f = peaks_grid(resolution)
    cls = np.digitize(f, peaks_thresholds(resolution, n_classes))
    chosen = [rng.choice(np.flatnonzero(cls == k), n_per_class, replace=False) for k in range(n_classes)]
    idx = np.concatenate(chosen)
    Y, lab = points[idx], cls[idx]
    perm = rng.permutation(len(Y))
    n_val = int(round(val_fraction * len(Y)))
    return _split(Y, lab, perm[n_val:], perm[:n_val], n_classes)


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    """Read an unsigned-byte IDX file (the MNIST container format)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset 0")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08 or expected_magic is not None and magic != expected_magic:
        want = f"0x{expected_magic:08x}" if expected_magic is not None else "0x000008xx"
        raise IdxFormatError(f"{path}: bad magic number 0x{magic:08x} at offset 0 (expected {want})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxFormatError(f"{path}: truncated data at offset {len(raw)}: "
                             f"expected {size} bytes after offset {header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + a.tobytes())


def load_mnist_idx(images_path, labels_path, seed: int = 0, n_train: int = 50000, n_val: int = 10000,
                   channels: int = 1):
    """Load MNIST IDX files and return a seeded random training/validation split.

    Pixels are scaled to [0, 1]; with ``channels > 1`` each image is repeated
    across channels in the pixel-major layout used by the convolution
    operators. ``n_train + n_val`` may be smaller than the file (subset).
    """
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3-D image array, got {images.ndim}-D")
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    if n_train + n_val > len(images):
        raise ValueError(f"requested {n_train + n_val} examples from a file of {len(images)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(images))
    X = images.reshape(len(images), -1).astype(float) / 255.0
    if channels > 1:
        X = np.repeat(X, channels, axis=1)
    return _split(X, labels, perm[:n_train], perm[n_train:n_train + n_val], 10)


def find_mnist(directory) -> tuple[Path, Path]:
    """Locate the training image/label files in ``directory`` (plain or gzipped)."""
    d = Path(directory)
    for stem_i, stem_l in (("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                           ("train-images.idx3-ubyte", "train-labels.idx1-ubyte")):
        for ext in ("", ".gz"):
            pi, pl = d / (stem_i + ext), d / (stem_l + ext)
            if pi.exists() and pl.exists():
                return pi, pl
    raise FileNotFoundError(f"no MNIST training IDX files in {d}")


DATASETS = {"ellipse": gen_ellipses, "swissroll": gen_swiss_roll, "peaks": gen_peaks}


def generate(name: str, seed: int = 0):
    try:
        return DATASETS[name](seed)
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}") from None
