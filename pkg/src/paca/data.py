"""Dataset ingestion and batching.

Two sources: the standard CIFAR-10/100 binary batch files, and a built-in
synthetic motif dataset so everything (tests included) can run without a
download. Synthetic classes are distinct colored shapes at class-determined
positions; only the pixel noise depends on the dataset seed, so separately
seeded train/eval splits stay mutually consistent.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import Tensor

__all__ = [
    "Dataset",
    "Batch",
    "CifarFormatError",
    "load_cifar",
    "write_cifar",
    "synth_dataset",
    "batch_iter",
    "NORM_MEAN",
    "NORM_STD",
]

NORM_MEAN = 0.5
NORM_STD = 0.5

_CIFAR_SIDE = 32
_CIFAR_PIXELS = _CIFAR_SIDE * _CIFAR_SIDE * 3


class CifarFormatError(ValueError):
    """Malformed CIFAR binary data (bad size, label out of range, ...)."""


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, 3) uint8
    labels: np.ndarray  # (n,) int64
    class_count: int
    split: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images/labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label out of range for class_count")

    def __len__(self) -> int:
        return len(self.labels)

    def geometry(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.class_count, self.split)


@dataclass
class Batch:
    images: Tensor  # (B, H, W, 3) float32, normalized
    labels: np.ndarray  # (B,) int64


# --------------------------------------------------------------------------
# CIFAR binary format
# --------------------------------------------------------------------------

_VARIANTS = {
    "c10": dict(label_bytes=1, classes=10, train_files=[f"data_batch_{i}.bin" for i in range(1, 6)],
                test_files=["test_batch.bin"]),
    "c100": dict(label_bytes=2, classes=100, train_files=["train.bin"], test_files=["test.bin"]),
}


def _decode_cifar_file(path: str, label_bytes: int, classes: int) -> tuple[np.ndarray, np.ndarray]:
    record = label_bytes + _CIFAR_PIXELS
    raw = np.fromfile(path, dtype=np.uint8)
    n_full, leftover = divmod(raw.size, record)
    if leftover:
        raise CifarFormatError(
            f"{path}: truncated record, file ends at byte {raw.size} (record {n_full} is {leftover}/{record} bytes)"
        )
    if n_full == 0:
        raise CifarFormatError(f"{path}: no records")
    rows = raw.reshape(n_full, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)  # fine label is the last label byte
    if labels.max() >= classes:
        raise CifarFormatError(f"{path}: label {labels.max()} out of range for {classes} classes")
    # planar R,G,B planes of 32x32 each -> (H, W, 3)
    images = rows[:, label_bytes:].reshape(n_full, 3, _CIFAR_SIDE, _CIFAR_SIDE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def load_cifar(path: str, variant: str, split: str) -> Dataset:
    """Read the standard CIFAR binary batch files from a directory."""
    if variant not in _VARIANTS:
        raise ValueError(f"unknown CIFAR variant {variant!r} (expected c10 or c100)")
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    spec = _VARIANTS[variant]
    names = spec["train_files"] if split == "train" else spec["test_files"]
    files = [os.path.join(path, n) for n in names]
    present = [f for f in files if os.path.exists(f)]
    if not present:
        raise FileNotFoundError(f"no CIFAR {variant} {split} files under {path!r} (expected e.g. {names[0]})")
    images, labels = [], []
    for f in present:
        im, lb = _decode_cifar_file(f, spec["label_bytes"], spec["classes"])
        images.append(im)
        labels.append(lb)
    return Dataset(np.concatenate(images), np.concatenate(labels), spec["classes"], split)


def write_cifar(ds: Dataset, path: str, variant: str, split: str) -> None:
    """Serialize a 32x32 dataset into CIFAR binary layout (fixtures, demos)."""
    spec = _VARIANTS[variant]
    if ds.geometry() != (_CIFAR_SIDE, _CIFAR_SIDE):
        raise ValueError(f"CIFAR files are 32x32, dataset is {ds.geometry()}")
    if ds.class_count > spec["classes"]:
        raise ValueError(f"dataset has {ds.class_count} classes, {variant} holds at most {spec['classes']}")
    os.makedirs(path, exist_ok=True)
    names = spec["train_files"] if split == "train" else spec["test_files"]
    planar = ds.images.transpose(0, 3, 1, 2).reshape(len(ds), _CIFAR_PIXELS)
    chunks = np.array_split(np.arange(len(ds)), len(names))
    for name, idx in zip(names, chunks):
        with open(os.path.join(path, name), "wb") as f:
            for i in idx:
                if spec["label_bytes"] == 2:
                    f.write(bytes([int(ds.labels[i]) // 5, int(ds.labels[i])]))  # coarse byte is synthetic
                else:
                    f.write(bytes([int(ds.labels[i])]))
                f.write(planar[i].tobytes())


# --------------------------------------------------------------------------
# synthetic motifs
# --------------------------------------------------------------------------


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _paint_motif(canvas: np.ndarray, cls: int) -> None:
    """Draw the class motif in place; geometry/color depend on class only."""
    h, w, _ = canvas.shape
    hue = (cls * 0.61803398875) % 1.0  # golden-ratio hue spacing
    color = np.array([round(255 * c) for c in _hsv_to_rgb(hue, 0.95, 1.0)], dtype=np.uint8)
    px = (0.5 + cls * 0.7548776662) % 1.0  # 2-D low-discrepancy positions
    py = (0.5 + cls * 0.5698402910) % 1.0
    size = max(3, min(h, w) // 4)
    cy = int(size + py * (h - 2 * size))
    cx = int(size + px * (w - 2 * size))
    kind = cls % 3
    if kind == 0:  # filled square
        canvas[cy - size // 2 : cy + (size + 1) // 2, cx - size // 2 : cx + (size + 1) // 2] = color
    elif kind == 1:  # filled disk
        yy, xx = np.ogrid[:h, :w]
        canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= (size // 2 + 1) ** 2] = color
    else:  # full-width horizontal stripe
        half = max(1, size // 3)
        canvas[max(0, cy - half) : min(h, cy + half + 1), :] = color


def synth_dataset(seed: int, n: int, classes: int, geometry: tuple[int, int] = (16, 16)) -> Dataset:
    """Seeded motif dataset: labels round-robin, one distinct shape per class."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    h, w = geometry
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % classes
    images = np.empty((n, h, w, 3), dtype=np.uint8)
    base = np.full((h, w, 3), 32, dtype=np.int16)
    motifs = []
    for cls in range(classes):
        canvas = base.astype(np.uint8).copy()
        _paint_motif(canvas, cls)
        motifs.append(canvas.astype(np.int16))
    for i in range(n):
        noise = rng.integers(-20, 21, size=(h, w, 3), dtype=np.int16)
        images[i] = np.clip(motifs[labels[i]] + noise, 0, 255).astype(np.uint8)
    return Dataset(images, labels, classes, "synth")


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


def normalize_images(images: np.ndarray, mean: float = NORM_MEAN, std: float = NORM_STD) -> np.ndarray:
    """uint8 pixels -> float32, (x/255 - mean) / std. Applied exactly once."""
    return ((images.astype(np.float32) / 255.0) - np.float32(mean)) / np.float32(std)


def batch_iter(
    ds: Dataset,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    mean: float = NORM_MEAN,
    std: float = NORM_STD,
    augment: bool = False,
) -> Iterator[Batch]:
    """One epoch of batches: seeded per-(seed, epoch) shuffle, last partial kept.

    Optional augmentation is a horizontal flip (p=0.5) and a 4-pixel-pad
    random crop, drawn from the same stream so runs stay reproducible.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ds))
    h, w = ds.geometry()
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        imgs = ds.images[idx]
        if augment:
            imgs = imgs.copy()
            flips = rng.random(len(idx)) < 0.5
            offs = rng.integers(0, 9, size=(len(idx), 2))
            for i in range(len(idx)):
                im = imgs[i, :, ::-1] if flips[i] else imgs[i]
                padded = np.pad(im, ((4, 4), (4, 4), (0, 0)))
                oy, ox = offs[i]
                imgs[i] = padded[oy : oy + h, ox : ox + w]
        yield Batch(Tensor(normalize_images(imgs, mean, std)), ds.labels[idx])
