"""Datasets: CIFAR binary ingestion, synthetic blobs, augmentation."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .rng import STREAM_DATA, RngStream

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)
CIFAR_PIXELS = 3 * 32 * 32
DATA_DIR_ENV = "HFN_DATA_DIR"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Images in raw units (``raw / scale`` is in [0, 1] for real data) and
    the per-channel constants used by ``normalize``."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)
    scale: float = 1.0

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None):
        return replace(self, images=self.images[idx], labels=self.labels[idx], split=split or self.split)


def data_dir():
    return os.environ.get(DATA_DIR_ENV, "data")


def load_cifar_binary(path, label_bytes=None, split="train"):
    """Read the public CIFAR binary layout.

    Each record is ``label_bytes`` label bytes (CIFAR-10: 1; CIFAR-100: coarse
    then fine, and the fine label is kept) followed by 3072 channel-major
    pixel bytes.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if label_bytes is None:
        if raw.size and raw.size % (CIFAR_PIXELS + 2) == 0:
            label_bytes = 2
        elif raw.size and raw.size % (CIFAR_PIXELS + 1) == 0:
            label_bytes = 1
        else:
            raise DatasetError(f"{path}: {raw.size} bytes is not a whole number of CIFAR records")
    rec = CIFAR_PIXELS + label_bytes
    if raw.size == 0 or raw.size % rec:
        raise DatasetError(f"{path}: truncated file ({raw.size} bytes, record size {rec})")
    raw = raw.reshape(-1, rec)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32)
    if label_bytes == 2:
        return Dataset(images, labels, split, 100, CIFAR100_MEAN, CIFAR100_STD, 255.0)
    return Dataset(images, labels, split, 10, CIFAR10_MEAN, CIFAR10_STD, 255.0)


def split_train_val(ds: Dataset, val_size: int, seed: int):
    """Deterministic seeded shuffle, then the last ``val_size`` become validation."""
    if not 0 < val_size < len(ds):
        raise DatasetError(f"val_size {val_size} must be in (0, {len(ds)})")
    perm = RngStream(seed, STREAM_DATA, substream=0xC1FA).permutation(len(ds))
    return ds.subset(perm[:-val_size], "train"), ds.subset(perm[-val_size:], "val")


def _blob_templates(rng, classes, size, blobs_per_class=3):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((classes, 3, size, size))
    for c in range(classes):
        for _ in range(blobs_per_class):
            cy, cx = rng.uniform(2) * (size - 1)
            width = size * (0.12 + 0.18 * rng.uniform(1)[0])
            colour = 2.0 * rng.uniform(3) - 1.0
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            out[c] += colour[:, None, None] * bump
    flat = out.reshape(classes, -1)
    # orthonormal class directions so every pair of means is equally far apart
    q, r = np.linalg.qr(flat.T)
    q = q * np.sign(np.diag(r))
    return q.T.reshape(classes, 3, size, size)


def synthetic_dataset(seed, n, classes, size=8, separation=3.0, split="train"):
    """Class-conditional Gaussians rendered as small images.

    Class means are orthogonal smooth blob patterns scaled so any two means lie
    ``separation`` noise standard deviations apart; pixels get unit Gaussian
    noise. Labels cycle through the classes in a shuffled order, so every
    class count is within one of ``n / classes``. Templates depend only on
    ``seed``; ``split`` selects an independent sample stream.
    """
    if n < classes:
        raise DatasetError("need at least one sample per class")
    if 3 * size * size < classes:
        raise DatasetError("image too small for orthogonal class templates")
    templates = _blob_templates(RngStream(seed, STREAM_DATA, substream=1), classes, size)
    sub = {"train": 2, "val": 3, "test": 4}.get(split, 5)
    rng = RngStream(seed, STREAM_DATA, substream=sub)
    labels = (np.arange(n) % classes)[rng.permutation(n)]
    noise = rng.normal(n * 3 * size * size).reshape(n, 3, size, size)
    images = noise + (separation / np.sqrt(2.0)) * templates[labels]
    return Dataset(images.astype(np.float32), labels.astype(np.int64), split, classes)


def normalize(images, ds: Dataset):
    mean = np.asarray(ds.mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(ds.std, dtype=np.float32)[None, :, None, None]
    return ((images / np.float32(ds.scale)) - mean) / std


def hflip(images):
    return images[..., ::-1]


def random_crop(images, pad, rng: RngStream):
    """Zero-pad by ``pad`` and crop back at a per-sample random offset."""
    if pad == 0:
        return images
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offs = rng.integers(2 * pad + 1, 2 * n).reshape(n, 2)
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offs):
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def augment(images, ds: Dataset, mode="train", rng: RngStream | None = None, crop_pad=4, flip=True):
    """Random crop + horizontal flip + normalize in train mode; eval mode only
    normalizes. ``rng`` must be a stream separate from the weight stream."""
    if mode == "eval":
        return normalize(images, ds)
    if rng is None:
        raise ValueError("train-mode augmentation needs an RNG stream")
    out = random_crop(images, crop_pad, rng)
    if flip:
        flips = rng.uniform(len(out)) < 0.5
        out = np.where(flips[:, None, None, None], hflip(out), out)
    return normalize(out, ds)
