"""Datasets: CSV and IDX readers/writers and a seeded Gaussian-blob generator."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    """``features`` holds one flattened sample per row; ``sample_shape`` restores it."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    sample_shape: tuple[int, ...] = ()
    split: str = "train"
    source: str = "memory"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f.reshape(-1, 1)
        if f.ndim != 2:
            raise DatasetError("features must be a matrix")
        y = np.asarray(self.labels)
        if y.ndim != 1 or y.shape[0] != f.shape[0]:
            raise DatasetError(f"{f.shape[0]} feature rows but {y.shape} labels")
        if y.size and (not np.issubdtype(y.dtype, np.integer) and not np.all(y == np.round(y))):
            raise DatasetError("labels must be integers")
        y = y.astype(np.int64)
        if self.num_classes < 1:
            raise DatasetError("num_classes must be >= 1")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DatasetError(f"label out of range [0, {self.num_classes})")
        shape = tuple(int(s) for s in self.sample_shape) or (f.shape[1],)
        if math.prod(shape) != f.shape[1]:
            raise DatasetError(f"sample shape {shape} does not hold {f.shape[1]} features")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "sample_shape", shape)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def inputs(self, rows=slice(None)) -> np.ndarray:
        """Model inputs for ``rows`` shaped (B, *sample_shape)."""
        f = self.features[rows]
        return f.reshape((f.shape[0],) + self.sample_shape)

    def with_shape(self, shape) -> "Dataset":
        return replace(self, sample_shape=tuple(shape))

    def subset(self, rows, split: str | None = None) -> "Dataset":
        return replace(self, features=self.features[rows], labels=self.labels[rows], split=split or self.split)


def split_dataset(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(np.sort(order[n_test:]), "train"), ds.subset(np.sort(order[:n_test]), "test")


def make_blobs(classes: int, dim: int, samples: int, seed: int, std: float = 1.0,
               separation: float = 4.0) -> Dataset:
    """Gaussian clusters with centers at least ``separation * std`` apart."""
    if min(classes, dim, samples) < 1:
        raise DatasetError("every count (classes, dim, samples) must be >= 1")
    rng = np.random.default_rng(seed)
    # Smallest cube that fits the centers at the minimum spacing; it grows
    # whenever rejection sampling stalls.
    radius = 0.5 * separation * std * classes ** (1.0 / dim)
    centers, misses = [], 0
    while len(centers) < classes:
        c = rng.uniform(-radius, radius, dim)
        if all(np.linalg.norm(c - o) >= separation * std for o in centers):
            centers.append(c)
            misses = 0
        else:
            misses += 1
            if misses == 200:
                radius, misses = radius * 1.1, 0
    centers = np.array(centers)
    labels = rng.permutation(np.arange(samples) % classes)
    features = centers[labels] + std * rng.standard_normal((samples, dim))
    return Dataset(features, labels, classes, (dim,), "train", "blobs")


# ---------------------------------------------------------------- CSV

def save_csv(ds: Dataset, path) -> None:
    """Features then label per row; %.17g keeps every float64 exact."""
    rows = [",".join([*("%.17g" % v for v in r), str(int(y))]) for r, y in zip(ds.features, ds.labels)]
    Path(path).write_text("\n".join(rows) + ("\n" if rows else ""))


def read_csv(path, num_classes: int | None = None) -> Dataset:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    feats, labels = [], []
    width = None
    for n, ln in enumerate(lines, start=1):
        cells = ln.split(",")
        if width is None:
            width = len(cells)
        if len(cells) != width or width < 2:
            raise DatasetError(f"{path}:{n}: expected {width} columns (features + label)")
        try:
            vals = [float(c) for c in cells]
        except ValueError as exc:
            raise DatasetError(f"{path}:{n}: {exc}") from None
        if vals[-1] != int(vals[-1]):
            raise DatasetError(f"{path}:{n}: label {cells[-1]!r} is not an integer")
        feats.append(vals[:-1])
        labels.append(int(vals[-1]))
    y = np.array(labels, dtype=np.int64)
    f = np.array(feats, dtype=np.float64).reshape(len(labels), (width or 1) - 1)
    k = num_classes if num_classes is not None else (int(y.max()) + 1 if y.size else 1)
    return Dataset(f, y, k, source="csv")


# ---------------------------------------------------------------- IDX

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES or raw[3] < 1:
        raise DatasetError(f"{path}: bad IDX magic")
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    dt = np.dtype(_IDX_TYPES[raw[2]])
    if len(raw) - head != math.prod(dims) * dt.itemsize:
        raise DatasetError(f"{path}: IDX payload does not match dimensions {dims}")
    return np.frombuffer(raw, dtype=dt, offset=head).reshape(dims)


def write_idx_array(arr: np.ndarray, path) -> None:
    arr = np.asarray(arr)
    code = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09, np.dtype(np.int16): 0x0B,
            np.dtype(np.int32): 0x0C, np.dtype(np.float32): 0x0D, np.dtype(np.float64): 0x0E}.get(arr.dtype)
    if code is None:
        raise DatasetError(f"no IDX type for {arr.dtype}")
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    Path(path).write_bytes(head + arr.astype(np.dtype(_IDX_TYPES[code])).tobytes())


def labels_path_for(images_path) -> Path:
    p = Path(images_path)
    if "images" not in p.name:
        raise DatasetError(f"{p}: cannot derive a labels file name (no 'images' in it); pass labels_path")
    return p.with_name(p.name.replace("images", "labels"))


def read_idx(images_path, labels_path=None, num_classes: int | None = None) -> Dataset:
    images = read_idx_array(images_path)
    lp = Path(labels_path) if labels_path is not None else labels_path_for(images_path)
    if not lp.exists():
        raise DatasetError(f"labels file not found: {lp}")
    labels = read_idx_array(lp)
    if labels.ndim != 1:
        raise DatasetError(f"{lp}: labels must be 1-d")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DatasetError(f"{lp}: labels must be integers")
    shape = images.shape[1:]
    if len(shape) == 2:
        shape = (1,) + shape
    y = labels.astype(np.int64)
    k = num_classes if num_classes is not None else (int(y.max()) + 1 if y.size else 1)
    return Dataset(images.reshape(images.shape[0], -1).astype(np.float64), y, k, shape, source="idx")


def write_idx(ds: Dataset, images_path, labels_path=None) -> None:
    write_idx_array(ds.features.reshape((len(ds),) + ds.sample_shape), images_path)
    lp = Path(labels_path) if labels_path is not None else labels_path_for(images_path)
    write_idx_array(ds.labels.astype(np.uint8 if ds.num_classes <= 256 else np.int32), lp)


def load_dataset(path, format: str | None = None, labels_path=None, num_classes: int | None = None) -> Dataset:
    """Read ``path`` as ``csv`` or ``idx``; the format defaults from the file name."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    fmt = format or ("csv" if p.suffix.lower() == ".csv" else "idx")
    if fmt == "csv":
        return read_csv(p, num_classes)
    if fmt == "idx":
        return read_idx(p, labels_path, num_classes)
    raise DatasetError(f"unknown dataset format {fmt!r}")
