"""Seeded desk-scale datasets: Gaussian blobs and IDX image archives."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # [n, d] float64
    labels: np.ndarray  # [n] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain NaN or Inf")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, index, split=None) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(
            self.features[index].copy(),
            self.labels[index].copy(),
            self.num_classes,
            split or self.split,
        )


def gen_blobs(num_classes: int, per_class: int, feature_dim: int, spread: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian clusters around class means placed on the unit sphere."""
    if min(num_classes, per_class, feature_dim) <= 0:
        raise ValueError("counts must be positive")
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal(scale=spread, size=(labels.size, feature_dim))
    return LabeledDataset(means[labels] + noise, labels.astype(np.int64), num_classes)


def split(dataset: LabeledDataset, train_fraction: float, seed: int, stratify: bool = False):
    """Seeded partition into (train, val).

    With ``stratify`` each class is split separately so per-class proportions
    are preserved up to rounding.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    if stratify:
        train_idx, val_idx = [], []
        for c in range(dataset.num_classes):
            members = rng.permutation(np.flatnonzero(dataset.labels == c))
            cut = int(round(train_fraction * members.size))
            train_idx.append(members[:cut])
            val_idx.append(members[cut:])
        train_idx = np.sort(np.concatenate(train_idx))
        val_idx = np.sort(np.concatenate(val_idx))
    else:
        perm = rng.permutation(len(dataset))
        cut = int(round(train_fraction * len(dataset)))
        train_idx, val_idx = np.sort(perm[:cut]), np.sort(perm[cut:])
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "val")


def desk_blobs(seed: int = 0, num_classes: int = 4, feature_dim: int = 16,
               train_per_class: int = 500, val_per_class: int = 250, spread: float = 0.6):
    """The default desk configuration: 500/class train, 250/class val."""
    total = train_per_class + val_per_class
    full = gen_blobs(num_classes, total, feature_dim, spread, seed)
    return split(full, train_per_class / total, seed + 1, stratify=True)


# ---------------------------------------------------------------------------
# IDX


def _read_exact(path: Path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, standardize: bool = False, num_classes: int | None = None) -> LabeledDataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1] and flattened."""
    raw = _read_exact(Path(images_path))
    if len(raw) < 8:
        raise FormatError(f"{images_path}: header truncated, expected at least 8 bytes, got {len(raw)}")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(raw) < 16:
        raise FormatError(f"{images_path}: header truncated, expected 16 bytes, got {len(raw)}")
    rows, cols = struct.unpack(">II", raw[8:16])
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{images_path}: expected {expected} bytes, got {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows * cols)

    raw_l = _read_exact(Path(labels_path))
    if len(raw_l) < 8:
        raise FormatError(f"{labels_path}: header truncated, expected 8 bytes, got {len(raw_l)}")
    magic_l, count_l = struct.unpack(">II", raw_l[:8])
    if magic_l != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad magic 0x{magic_l:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw_l) != 8 + count_l:
        raise FormatError(f"{labels_path}: expected {8 + count_l} bytes, got {len(raw_l)}")
    if count_l != count:
        raise FormatError(f"image count {count} does not match label count {count_l}")
    labels = np.frombuffer(raw_l, dtype=np.uint8, offset=8).astype(np.int64)

    features = pixels.astype(np.float64) / 255.0
    if standardize:
        mu = features.mean(axis=0)
        sd = features.std(axis=0)
        features = (features - mu) / np.where(sd > 0, sd, 1.0)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1 if labels.size else 2, 2)
    return LabeledDataset(features, labels, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images [n, rows, cols] and labels [n] as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ValueError("images must be [n, rows, cols] with one label per image")
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels.tobytes())
