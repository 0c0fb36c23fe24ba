"""Datasets, the two-way training split, and batching."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

RECORD = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
# per-channel statistics of the CIFAR-10 training set, RGB
CIFAR_MEAN = (0.49139968, 0.48215827, 0.44653124)
CIFAR_STD = (0.24703233, 0.24348505, 0.26158768)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (count, C, H, W), normalized reals
    labels: np.ndarray  # (count,) int64
    classes: int
    name: str = "dataset"

    def __post_init__(self):
        if len(self.images) == 0:
            raise DataError(f"{self.name}: empty dataset")
        if len(self.images) != len(self.labels):
            raise DataError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise DataError(f"{self.name}: labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]


# ----------------------------------------------------------------------------
# CIFAR-10 binary version

def parse_cifar_bytes(raw: bytes, source: str = "<bytes>"):
    """Split raw records into uint8 images (n, 3, 32, 32) and labels."""
    n, tail = divmod(len(raw), RECORD)
    if tail:
        raise DataError(f"{source}: size {len(raw)} is not a multiple of {RECORD}; "
                        f"incomplete record at byte offset {n * RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        k = int(bad[0])
        raise DataError(f"{source}: record {k} has label {labels[k]} (expected < {CIFAR_CLASSES})")
    images = rec[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE)
    return images, labels


def normalize(images_u8, mean, std, dtype=np.float32):
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return ((images_u8.astype(np.float64) / 255.0 - mean) / std).astype(dtype)


def read_cifar10(path, files=CIFAR_TRAIN_FILES, mean=CIFAR_MEAN, std=CIFAR_STD, limit=None) -> Dataset:
    """Load the binary CIFAR-10 batches from a directory (or one file)."""
    paths = [path] if os.path.isfile(path) else [os.path.join(path, f) for f in files]
    images, labels = [], []
    for p in paths:
        if not os.path.exists(p):
            raise DataError(f"missing CIFAR-10 batch file {p}")
        with open(p, "rb") as fh:
            im, lb = parse_cifar_bytes(fh.read(), p)
        images.append(im)
        labels.append(lb)
    im = np.concatenate(images)
    lb = np.concatenate(labels)
    if limit is not None:
        im, lb = im[:limit], lb[:limit]
    return Dataset(normalize(im, mean, std), lb, CIFAR_CLASSES, "cifar10")


def write_cifar_bytes(images_u8, labels) -> bytes:
    """Inverse of :func:`parse_cifar_bytes`; handy for fixtures."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    return rec.tobytes()


# ----------------------------------------------------------------------------
# synthetic gratings

def grating_templates(classes: int, resolution: int, channels: int = 3):
    """One unit-RMS oriented sinusoid per class, orientations evenly spread over 180 degrees."""
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    freq = 2 * np.pi / max(resolution / 2, 2.0)
    out = np.empty((classes, channels, resolution, resolution))
    for k in range(classes):
        theta = np.pi * k / classes
        wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + 0.5)
        wave /= np.sqrt((wave ** 2).mean())
        # channels share orientation but carry different gains
        for c in range(channels):
            out[k, c] = wave * (1.0 - 0.2 * c)
    return out


def make_synthetic(classes=2, resolution=8, count=2000, seed=0, noise=1.0, channels=3,
                   dtype=np.float32) -> Dataset:
    """Class-conditional gratings plus Gaussian noise, classes balanced within one."""
    if count < classes:
        raise DataError(f"synthetic: count {count} < classes {classes}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % classes).astype(np.int64)
    templates = grating_templates(classes, resolution, channels)
    images = templates[labels] + noise * rng.normal(size=(count, channels, resolution, resolution))
    return Dataset(images.astype(dtype), labels, classes, f"synthetic-{classes}x{resolution}")


def nearest_template(images, templates):
    """Predict the class whose template is closest in Euclidean distance."""
    flat = images.reshape(len(images), -1).astype(np.float64)
    t = templates.reshape(len(templates), -1)
    d = (flat ** 2).sum(1)[:, None] - 2 * flat @ t.T + (t ** 2).sum(1)[None, :]
    return d.argmin(axis=1)


# ----------------------------------------------------------------------------
# splits and batches

@dataclass(frozen=True)
class SplitPlan:
    seed: int
    w: np.ndarray
    a: np.ndarray

    def half(self, name):
        if name not in ("w", "a"):
            raise ValueError(f"half must be 'w' or 'a', got {name!r}")
        return self.w if name == "w" else self.a


def split_half(count_or_dataset, seed: int = 0) -> SplitPlan:
    """Random equal halves; an odd final item is dropped first."""
    n = count_or_dataset if isinstance(count_or_dataset, int) else len(count_or_dataset)
    n -= n % 2
    if n < 2:
        raise DataError("need at least two examples to split")
    perm = np.random.default_rng([seed, 10]).permutation(n)
    return SplitPlan(seed, np.sort(perm[: n // 2]), np.sort(perm[n // 2:]))


def augment_batch(x, rng, pad=4, flip=True):
    """Random crop after zero padding, then random horizontal flip."""
    B, C, H, W = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=B)
    ox = rng.integers(0, 2 * pad + 1, size=B)
    out = np.empty_like(x)
    for b in range(B):
        out[b] = padded[b, :, oy[b]:oy[b] + H, ox[b]:ox[b] + W]
    if flip:
        mask = rng.random(B) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    return out


def batch_count(plan: SplitPlan, half: str, batch_size: int) -> int:
    return len(plan.half(half)) // batch_size


def batches(dataset: Dataset, plan: SplitPlan, half: str, batch_size: int, epoch_seed: int,
            augment: bool = False, pad: int = 4):
    """Yield (images, labels) of one epoch over one half; the partial tail is dropped."""
    idx = plan.half(half)
    if batch_size < 1 or batch_size > len(idx):
        raise DataError(f"batch size {batch_size} does not fit a half of {len(idx)} examples")
    stream = 0 if half == "w" else 1
    rng = np.random.default_rng([plan.seed, epoch_seed, stream])
    order = idx[rng.permutation(len(idx))]
    for k in range(len(idx) // batch_size):
        take = order[k * batch_size:(k + 1) * batch_size]
        x = dataset.images[take]
        if augment:
            x = augment_batch(x, rng, pad)
        yield x, dataset.labels[take]
