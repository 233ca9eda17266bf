"""Dataset ingestion, normalization, and the leave-one-class-out protocol.

Supported sources: IDX image/label pairs (digit sets), CIFAR-10 binary
batches, a manifest directory of raw grayscale slices (medical exports), and
a seeded synthetic shapes generator for desk-scale runs. All loaders are
deterministic; the split shuffling is driven entirely by an explicit seed.
"""

from __future__ import annotations

import csv
import pathlib
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataError",
    "FormatError",
    "TruncatedFileError",
    "CountMismatchError",
    "AlreadyNormalizedError",
    "DegenerateInputError",
    "MissingClassError",
    "LabeledImageSet",
    "DatasetSplit",
    "load_idx",
    "load_cifar10",
    "load_manifest",
    "normalize_unit",
    "denormalize_unit",
    "normalize_images",
    "zscore_normalize",
    "to_32",
    "leave_one_out_split",
    "synthetic_shapes",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3x32x32 pixels


class DataError(Exception):
    """Base class for dataset problems."""


class FormatError(DataError):
    """File content does not match the declared format (bad magic, bad labels)."""


class TruncatedFileError(DataError):
    """File ended before the declared payload was complete."""


class CountMismatchError(DataError):
    """Image and label counts disagree."""


class AlreadyNormalizedError(DataError):
    """Refusing to normalize data that is already in [-1, 1]."""


class DegenerateInputError(DataError):
    """A slice without usable foreground statistics."""


class MissingClassError(DataError):
    """The requested anomaly class has no samples."""


@dataclass
class LabeledImageSet:
    images: np.ndarray              # N x C x H x W
    class_labels: np.ndarray        # N ints
    source: str
    normalized: bool = False
    ids: list[str] | None = None    # optional stable per-sample identifiers

    def __post_init__(self):
        if self.images.shape[0] != len(self.class_labels):
            raise CountMismatchError(
                f"{self.source}: {self.images.shape[0]} images vs "
                f"{len(self.class_labels)} labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx: np.ndarray, source_suffix: str) -> "LabeledImageSet":
        ids = [self.ids[i] for i in idx] if self.ids is not None else [str(i) for i in idx]
        return LabeledImageSet(self.images[idx], self.class_labels[idx],
                               f"{self.source}{source_suffix}", self.normalized, ids)


@dataclass(frozen=True)
class DatasetSplit:
    train: LabeledImageSet          # normal classes only
    test: LabeledImageSet
    test_anomalous: np.ndarray      # bool per test sample
    anomaly_class: int
    split_seed: int


# ---------------------------------------------------------------------------
# IDX and CIFAR-10 binary containers
# ---------------------------------------------------------------------------

def _read_exact(fh, n: int, path, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise TruncatedFileError(f"{path}: expected {n} bytes for {what}, got {len(raw)}")
    return raw


def load_idx(images_path, labels_path) -> LabeledImageSet:
    """Parse a big-endian IDX image/label file pair into raw byte images."""
    images_path, labels_path = pathlib.Path(images_path), pathlib.Path(labels_path)
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "header"))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        pixels = _read_exact(fh, count * rows * cols, images_path, f"{count} images")
        images = np.frombuffer(pixels, dtype=np.uint8).reshape(count, 1, rows, cols)
    with open(labels_path, "rb") as fh:
        magic, n_labels = struct.unpack(">II", _read_exact(fh, 8, labels_path, "header"))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(fh, n_labels, labels_path, f"{n_labels} labels"),
                               dtype=np.uint8).astype(np.int64)
    if n_labels != count:
        raise CountMismatchError(
            f"{images_path} holds {count} images but {labels_path} holds {n_labels} labels")
    return LabeledImageSet(images, labels, source=str(images_path), normalized=False)


def load_cifar10(batch_paths) -> LabeledImageSet:
    """Parse label-prefixed 3072-byte-record CIFAR-10 binary batches."""
    all_images, all_labels = [], []
    for path in batch_paths:
        raw = pathlib.Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise TruncatedFileError(
                f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}-byte records")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = records[:, 0].astype(np.int64)
        if labels.max() > 9:
            raise FormatError(f"{path}: label byte {labels.max()} out of range 0..9")
        all_images.append(records[:, 1:].reshape(-1, 3, 32, 32))
        all_labels.append(labels)
    images = np.concatenate(all_images)
    labels = np.concatenate(all_labels)
    return LabeledImageSet(images, labels, source=",".join(str(p) for p in batch_paths),
                           normalized=False)


# ---------------------------------------------------------------------------
# normalization and resizing
# ---------------------------------------------------------------------------

def normalize_unit(x: np.ndarray) -> np.ndarray:
    """Map raw bytes 0..255 onto [-1, 1] (v / 127.5 - 1)."""
    return (np.asarray(x, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def denormalize_unit(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_unit`, rounded back to bytes."""
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def normalize_images(ds: LabeledImageSet) -> LabeledImageSet:
    """[-1, 1]-normalize a raw set; refuses sets already normalized."""
    if ds.normalized:
        raise AlreadyNormalizedError(f"{ds.source}: images are already in [-1, 1]")
    return LabeledImageSet(normalize_unit(ds.images), ds.class_labels, ds.source,
                           normalized=True, ids=ds.ids)


def zscore_normalize(slice2d: np.ndarray) -> np.ndarray:
    """Standardize a raw intensity slice by its foreground statistics.

    Foreground is every nonzero pixel. The standardized values are clipped to
    +-3 sigma and squeezed affinely onto [-1, 1] so they can feed the tanh
    output head.
    """
    arr = np.asarray(slice2d, dtype=np.float64)
    fg = arr != 0
    if not fg.any():
        raise DegenerateInputError("slice has no nonzero foreground")
    mu = arr[fg].mean()
    sigma = arr[fg].std()
    if sigma == 0:
        raise DegenerateInputError("slice foreground has zero variance")
    z = np.clip((arr - mu) / sigma, -3.0, 3.0)
    return (z / 3.0).astype(np.float32)


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def to_32(img: np.ndarray, pad_value: float = -1.0) -> np.ndarray:
    """Bring one normalized 2-d image to 32x32.

    28x28 inputs get an exact 2-pixel border; 32x32 inputs pass through
    unchanged; anything else is padded to square and bilinearly resized.
    """
    if img.ndim != 2:
        raise FormatError(f"to_32 expects a 2-d image, got shape {img.shape}")
    h, w = img.shape
    if h > 512 or w > 512:
        raise FormatError(f"image {img.shape} exceeds the 512x512 ingestion limit")
    if (h, w) == (32, 32):
        return img.copy()
    if (h, w) == (28, 28):
        return np.pad(img, 2, constant_values=pad_value)
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    square = np.pad(img, ((top, side - h - top), (left, side - w - left)),
                    constant_values=pad_value)
    return _bilinear_resize(square, 32, 32)


# ---------------------------------------------------------------------------
# manifest directory of raw slices
# ---------------------------------------------------------------------------

_LABEL_VALUES = {"normal": 0, "anomalous": 1, "0": 0, "1": 1}


def load_manifest(manifest_path) -> LabeledImageSet:
    """Load slices listed in a CSV manifest (columns id,path,label).

    Paths are resolved relative to the manifest. Each slice file is a 2-d
    ``.npy`` array of raw intensities; slices are z-score normalized and
    resized to 32x32 on load.
    """
    manifest_path = pathlib.Path(manifest_path)
    base = manifest_path.parent
    ids: list[str] = []
    labels: list[int] = []
    images: list[np.ndarray] = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != ["id", "path", "label"]:
            raise FormatError(f"{manifest_path}: expected header id,path,label")
        for row in reader:
            label = _LABEL_VALUES.get(row["label"].strip().lower())
            if label is None:
                raise FormatError(f"{manifest_path}: bad label {row['label']!r} for id {row['id']}")
            arr = np.load(base / row["path"])
            if arr.ndim != 2:
                raise FormatError(f"{row['path']}: expected a 2-d slice, got shape {arr.shape}")
            images.append(to_32(zscore_normalize(arr))[None])
            ids.append(row["id"])
            labels.append(label)
    if not images:
        raise FormatError(f"{manifest_path}: manifest lists no slices")
    return LabeledImageSet(np.stack(images).astype(np.float32), np.array(labels),
                           source=str(manifest_path), normalized=True, ids=ids)


# ---------------------------------------------------------------------------
# leave-one-class-out split
# ---------------------------------------------------------------------------

def leave_one_out_split(data: LabeledImageSet, anomaly_class: int, seed: int,
                        max_train: int | None = None) -> DatasetSplit:
    """Hold one class out as the anomaly; 80/20-split the remaining classes.

    The training set is a seeded shuffle of 80% of the normal images (capped
    at ``max_train`` when given); the test set is the remaining normal images
    plus every image of the held-out class.
    """
    labels = np.asarray(data.class_labels)
    anomaly_idx = np.flatnonzero(labels == anomaly_class)
    normal_idx = np.flatnonzero(labels != anomaly_class)
    if anomaly_idx.size == 0:
        raise MissingClassError(f"class {anomaly_class} has no samples in {data.source}")
    if normal_idx.size == 0:
        raise MissingClassError(f"no normal samples besides class {anomaly_class}")
    rng = np.random.default_rng(seed)
    perm = normal_idx[rng.permutation(normal_idx.size)]
    n_train = int(0.8 * perm.size)
    train_idx = perm[:n_train]
    if max_train is not None:
        train_idx = train_idx[:max_train]
    test_idx = np.concatenate([perm[n_train:], anomaly_idx])
    test = data.subset(test_idx, f"[test holdout={anomaly_class}]")
    return DatasetSplit(
        train=data.subset(train_idx, f"[train holdout={anomaly_class}]"),
        test=test,
        test_anomalous=(test.class_labels == anomaly_class),
        anomaly_class=anomaly_class,
        split_seed=seed,
    )


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def _rect(rng: np.random.Generator) -> np.ndarray:
    img = np.full((32, 32), -1.0, dtype=np.float32)
    w = int(rng.integers(9, 17))
    h = int(rng.integers(9, 17))
    x0 = int(rng.integers(2, 31 - w))
    y0 = int(rng.integers(2, 31 - h))
    v = np.float32(rng.uniform(0.2, 0.9))
    img[y0:y0 + h, x0:x0 + w] = v
    return img


def _cross(rng: np.random.Generator) -> np.ndarray:
    img = np.full((32, 32), -1.0, dtype=np.float32)
    t = int(rng.integers(3, 6))
    length = int(rng.integers(15, 24))
    cy = int(rng.integers(13, 20))
    cx = int(rng.integers(13, 20))
    v = np.float32(rng.uniform(0.2, 0.9))
    half = length // 2
    img[cy - t // 2:cy - t // 2 + t, max(cx - half, 0):cx - half + length] = v
    img[max(cy - half, 0):cy - half + length, cx - t // 2:cx - t // 2 + t] = v
    return img


def _ring(rng: np.random.Generator) -> np.ndarray:
    img = np.full((32, 32), -1.0, dtype=np.float32)
    r = rng.uniform(7.0, 10.5)
    th = rng.uniform(2.2, 3.2)
    cy = rng.uniform(13.0, 19.0)
    cx = rng.uniform(13.0, 19.0)
    v = np.float32(rng.uniform(0.2, 0.9))
    yy, xx = np.mgrid[0:32, 0:32]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    mask = ((r - th / 2) ** 2 <= d2) & (d2 <= (r + th / 2) ** 2)
    img[mask] = v
    return img


def synthetic_shapes(n_normal: int, n_anomalous: int, seed: int) -> LabeledImageSet:
    """Deterministic 32x32 grayscale shapes: rectangles are class 0 (normal),
    crosses and rings are class 1 (anomalous).

    Both classes draw fill intensity from the same distribution and cover
    similar areas, so brightness alone does not separate them; only shape
    does.
    """
    if n_normal < 1 or n_anomalous < 1:
        raise DataError("synthetic_shapes needs at least one sample per class")
    rng = np.random.default_rng(seed)
    images = np.empty((n_normal + n_anomalous, 1, 32, 32), dtype=np.float32)
    labels = np.empty(n_normal + n_anomalous, dtype=np.int64)
    for i in range(n_normal):
        images[i, 0] = _rect(rng)
        labels[i] = 0
    for i in range(n_normal, n_normal + n_anomalous):
        images[i, 0] = _cross(rng) if rng.uniform() < 0.5 else _ring(rng)
        labels[i] = 1
    return LabeledImageSet(images, labels, source=f"synthetic_shapes(seed={seed})",
                           normalized=True)
