"""Datasets: hermetic synthetic shapes and the CIFAR binary format.

Synthetic samples are grayscale shape templates with per-sample translation
jitter and per-sample Gaussian pixel noise drawn uniformly from [0, noise];
the noise level doubles as a ground-truth difficulty score, which is what the
exit-sorting experiments measure against.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, TocError

DATA_ROOT_ENV = "TOCLIB_DATA_ROOT"

CIFAR10_RECORD = 3073   # 1 label byte + 3072 pixel bytes
CIFAR100_RECORD = 3074  # coarse + fine label bytes + 3072 pixel bytes
CIFAR10_FILES = ("data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                 "data_batch_4.bin", "data_batch_5.bin")
CIFAR10_TEST = "test_batch.bin"
CIFAR100_TRAIN, CIFAR100_TEST = "train.bin", "test.bin"


@dataclass
class Dataset:
    """Images (N, H, W, C) in [0,1], integer labels, and disjoint named splits."""

    images: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    num_classes: int
    noise_levels: np.ndarray | None = None   # per-sample difficulty, when known

    def __post_init__(self):
        seen = np.concatenate([np.asarray(v) for v in self.splits.values()]) if self.splits else np.array([])
        if seen.size != np.unique(seen).size:
            raise DataError("dataset splits overlap")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise DataError("labels outside [0, num_classes)")

    def split(self, name: str):
        idx = self.splits[name]
        noise = self.noise_levels[idx] if self.noise_levels is not None else None
        return Split(self.images[idx], self.labels[idx], noise)


@dataclass
class Split:
    images: np.ndarray   # (N, H, W, C): engine-ready, channels last
    labels: np.ndarray
    noise_levels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)


def to_onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# -- synthetic shapes -----------------------------------------------------------


def _templates(size: int, shape_frac: float = 0.45) -> list[np.ndarray]:
    """Shape motifs drawn centered on an otherwise empty canvas.

    ``shape_frac`` sets the motif diameter relative to the canvas; small motifs
    under jitter make the task compositional (find the pattern, then read it),
    which is what separates shallow exits from deep ones.
    """
    s = max(5, int(round(size * shape_frac)))
    y, x = np.mgrid[0:s, 0:s]
    cy = cx = (s - 1) / 2.0
    r = np.hypot(y - cy, x - cx)
    disk = (r <= s / 2.2).astype(float)
    square = ((np.abs(y - cy) <= s / 2.6) & (np.abs(x - cx) <= s / 2.6)).astype(float)
    cross = ((np.abs(y - cy) <= s / 5.5) | (np.abs(x - cx) <= s / 5.5)).astype(float)
    diag = (np.abs(y - x) <= s / 5.5).astype(float)
    ring = ((r <= s / 2.0) & (r >= s / 4.2)).astype(float)
    triangle = ((y >= x) & (y + x <= s - 1) | (y >= s - 1 - x) & (y <= x)).astype(float)
    hstripe = (np.abs(y - cy) <= s / 5.5).astype(float)
    checker = (((y * 2 // s) + (x * 2 // s)) % 2).astype(float)
    lo = (size - s) // 2
    out = []
    for motif in (disk, square, cross, diag, ring, triangle, hstripe, checker):
        canvas = np.zeros((size, size))
        canvas[lo : lo + s, lo : lo + s] = motif
        out.append(canvas)
    return out


def gen_synthetic(n: int, size: int = 16, classes: int = 4, noise: float = 0.5,
                  jitter: int = 2, seed: int = 0, val_fraction: float = 0.2,
                  test_fraction: float = 0.2) -> Dataset:
    """Render n grayscale shape images with jitter and per-sample noise.

    Labels are exactly balanced (up to remainder), then shuffled. Per-sample
    noise sigma is uniform on [0, noise]: low-sigma samples are easy, high-sigma
    ones hard, which exercises the early/late-exit split.
    """
    if not 2 <= classes <= 8:
        raise DataError(f"classes must be in 2..8, got {classes}")
    if n < classes:
        raise DataError(f"need at least one sample per class, got n={n}")
    rng = np.random.default_rng(seed)
    templates = _templates(size)[:classes]
    labels = rng.permutation(np.arange(n) % classes)
    sigma = rng.uniform(0.0, noise, size=n) if noise > 0 else np.zeros(n)

    images = np.empty((n, size, size, 1))
    for j in range(n):
        img = templates[labels[j]]
        if jitter:
            dy, dx = rng.integers(-jitter, jitter + 1, size=2)
            img = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
        if sigma[j] > 0:
            img = img + rng.standard_normal((size, size)) * sigma[j]
        images[j, :, :, 0] = np.clip(img, 0.0, 1.0)

    order = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    n_test = int(round(n * test_fraction))
    splits = {
        "test": order[:n_test],
        "val": order[n_test : n_test + n_val],
        "train": order[n_test + n_val :],
    }
    return Dataset(images=images, labels=labels, splits=splits,
                   num_classes=classes, noise_levels=sigma)


# -- CIFAR binary format ----------------------------------------------------------


def data_root(path=None) -> Path:
    if path is not None:
        return Path(path)
    env = os.environ.get(DATA_ROOT_ENV)
    if not env:
        raise DataError(f"no dataset path given and {DATA_ROOT_ENV} is not set")
    return Path(env)


def _parse_cifar_file(path: Path, record_size: int, label_offset: int, num_classes: int):
    blob = path.read_bytes()
    if len(blob) == 0 or len(blob) % record_size != 0:
        raise ParseError(f"{path.name}: file length {len(blob)} is not a multiple of the "
                         f"{record_size}-byte record", offset=len(blob) - (len(blob) % record_size))
    n = len(blob) // record_size
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, record_size)
    labels = raw[:, label_offset].astype(int)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise ParseError(f"{path.name}: label {labels[bad[0]]} out of range [0,{num_classes})",
                         offset=int(bad[0]) * record_size + label_offset)
    pixels = raw[:, record_size - 3072 :].reshape(n, 3, 32, 32)  # channel-planar R,G,B
    images = pixels.transpose(0, 2, 3, 1).astype(float) / 255.0
    return images, labels


def parse_cifar(path=None, variant: str = "cifar10", val_count: int = 5000) -> Dataset:
    """Load the published binary layout into train/val/test splits.

    The validation split is carved from the tail of the training records. File
    set and record sizes follow the distributed archives: 3073-byte records
    with one label byte for the 10-class set, 3074-byte records with coarse
    plus fine label bytes (fine is used) for the 100-class set.
    """
    root = data_root(path)
    if variant == "cifar10":
        train_files, test_file = CIFAR10_FILES, CIFAR10_TEST
        record, label_off, m = CIFAR10_RECORD, 0, 10
    elif variant == "cifar100":
        train_files, test_file = (CIFAR100_TRAIN,), CIFAR100_TEST
        record, label_off, m = CIFAR100_RECORD, 1, 100  # byte 0 coarse, byte 1 fine
    else:
        raise DataError(f"unknown variant {variant!r}")

    imgs, labs = [], []
    for fname in train_files:
        f = root / fname
        if not f.exists():
            raise DataError(f"missing dataset file {f}")
        i, l = _parse_cifar_file(f, record, label_off, m)
        imgs.append(i)
        labs.append(l)
    test_images, test_labels = _parse_cifar_file(root / test_file, record, label_off, m)

    images = np.concatenate(imgs + [test_images])
    labels = np.concatenate(labs + [test_labels])
    n_train_all = len(labels) - len(test_labels)
    val_count = min(val_count, max(0, n_train_all // 10))
    splits = {
        "train": np.arange(0, n_train_all - val_count),
        "val": np.arange(n_train_all - val_count, n_train_all),
        "test": np.arange(n_train_all, len(labels)),
    }
    return Dataset(images=images, labels=labels, splits=splits, num_classes=m)


def augment_batch(images: np.ndarray, rng: np.random.Generator,
                  pad: int = 4, mean=None, std=None) -> np.ndarray:
    """Standard training augmentation: zero-pad, random crop back, flip with
    probability 0.5, then (optionally) standardize per channel."""
    n, h, w, c = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty_like(images)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for j in range(n):
        dy, dx = offs[j]
        crop = padded[j, dy : dy + h, dx : dx + w, :]
        out[j] = crop[:, ::-1, :] if flips[j] else crop
    if mean is not None:
        out = (out - np.asarray(mean).reshape(1, 1, 1, c)) / np.asarray(std).reshape(1, 1, 1, c)
    return out
