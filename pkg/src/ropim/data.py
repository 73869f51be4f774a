"""Datasets: the CIFAR-10 binary reader, a synthetic stand-in, normalization."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ropim import rng
from ropim.errors import FormatError

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class ImageRecord:
    pixels: np.ndarray
    label: int | None = None


class Dataset:
    """An immutable stack of H x W x C images in [0, 1] with optional labels.

    ``images`` may hold standardized values once :func:`standardize` has been
    applied; ``stats`` then records the transform.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray | None, class_count: int,
                 split: str = "train", stats: "ChannelStats | None" = None):
        images = np.array(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[..., None]
        if images.ndim != 4 or images.shape[0] < 1:
            raise ValueError(f"expected a nonempty (n, H, W, C) stack, got {images.shape}")
        if not np.all(np.isfinite(images)):
            raise ValueError("images contain non-finite values")
        if stats is None and (images.min() < 0 or images.max() > 1):
            raise ValueError("raw images must lie in [0, 1]")
        if labels is not None:
            labels = np.array(labels, dtype=np.int64)
            if labels.shape != (images.shape[0],):
                raise ValueError("one label per image required")
            if labels.size and (labels.min() < 0 or labels.max() >= class_count):
                raise ValueError(f"labels must lie in [0, {class_count})")
            labels.setflags(write=False)
        images.setflags(write=False)
        self.images = images
        self.labels = labels
        self.class_count = int(class_count)
        self.split = split
        self.stats = stats

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> ImageRecord:
        label = None if self.labels is None else int(self.labels[i])
        return ImageRecord(self.images[i], label)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def channel_mean(self) -> np.ndarray:
        return self.images.mean(axis=(0, 1, 2))

    def channel_std(self) -> np.ndarray:
        return self.images.std(axis=(0, 1, 2))

    def subset(self, indices, split: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.class_count,
                       split or self.split, self.stats)

    def with_split(self, split: str) -> "Dataset":
        return Dataset(self.images, self.labels, self.class_count, split, self.stats)


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, images: np.ndarray) -> np.ndarray:
        return (images - self.mean) / self.std

    def invert(self, images: np.ndarray) -> np.ndarray:
        return images * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def channel_stats(dataset: Dataset) -> ChannelStats:
    mean = dataset.channel_mean()
    lo = dataset.images.min(axis=(0, 1, 2))
    hi = dataset.images.max(axis=(0, 1, 2))
    # A constant channel's float mean can miss its value by an ulp; use the value
    # itself so the standardized channel is exactly zero.
    mean = np.where(lo == hi, lo, mean)
    std = np.maximum(dataset.channel_std(), STD_FLOOR)
    return ChannelStats(mean, std)


def standardize(dataset: Dataset, stats: ChannelStats | None = None) -> tuple[Dataset, ChannelStats]:
    """Per-channel (x - mean) / std using ``stats`` (default: this dataset's own)."""
    if dataset.stats is not None:
        raise ValueError("dataset is already standardized")
    stats = stats or channel_stats(dataset)
    return (Dataset(stats.apply(dataset.images), dataset.labels, dataset.class_count,
                    dataset.split, stats), stats)


def _parse_cifar_bytes(buf: np.ndarray, source: str) -> tuple[np.ndarray, np.ndarray]:
    if buf.size % CIFAR_RECORD:
        raise FormatError(f"{source}: length {buf.size} is not a multiple of {CIFAR_RECORD}")
    records = buf.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{source}: label {labels[i]} > 9 at byte offset {i * CIFAR_RECORD}")
    planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels


def read_cifar_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch into ((n, 32, 32, 3) floats in [0, 1], labels)."""
    path = Path(path)
    try:
        buf = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read CIFAR-10 batch {path}: {exc}") from exc
    return _parse_cifar_bytes(buf, str(path))


def find_cifar_dir(path=None) -> Path:
    """Resolve ``path`` (or ``$ROPIM_DATA_DIR``) to the directory holding the batches."""
    root = path if path is not None else os.environ.get("ROPIM_DATA_DIR")
    if root is None:
        raise FileNotFoundError("no CIFAR-10 location: pass --data or set ROPIM_DATA_DIR")
    root = Path(root)
    for cand in (root, root / "cifar-10-batches-bin"):
        if any((cand / f).is_file() for f in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES):
            return cand
    raise FileNotFoundError(f"no CIFAR-10 binary batches under {root}")


def load_cifar10(path=None, split: str = "train") -> Dataset:
    """Load CIFAR-10 binary batches one file at a time.

    ``path`` may be a single ``.bin`` file or a directory containing
    ``data_batch_*.bin`` / ``test_batch.bin``.
    """
    if path is not None and Path(path).is_file():
        files = [Path(path)]
    else:
        root = find_cifar_dir(path)
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [root / n for n in names if (root / n).is_file()]
        if not files:
            raise FileNotFoundError(f"no {split} batches in {root}")
    images, labels = [], []
    for f in files:
        im, lb = read_cifar_file(f)
        images.append(im)
        labels.append(lb)
    return Dataset(np.concatenate(images), np.concatenate(labels), 10, split)


def write_cifar_file(path, images_u8: np.ndarray, labels) -> None:
    """Write (n, 32, 32, 3) uint8 images in the CIFAR-10 binary layout."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    planes = images_u8.transpose(0, 3, 1, 2).reshape(len(labels), -1)
    np.concatenate([labels[:, None], planes], axis=1).tofile(path)


def synthetic_dataset(n: int, image_size: int = 32, channels: int = 3, class_count: int = 10,
                      seed: int = 0) -> Dataset:
    """Class-conditioned Gaussian blobs on a smooth background, clipped to [0, 1].

    Each class owns a blob centre, width and colour; samples jitter the centre
    and add mild pixel noise, so class means are well separated. The class
    templates depend only on ``seed``, so a larger ``n`` with the same seed
    yields further samples of the same classes.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    bitgen = rng.philox(rng.derive_seed(seed, 0x5E7))
    u = lambda *shape: rng.uniform01(bitgen, shape)  # noqa: E731
    centres = 0.2 + 0.6 * u(class_count, 2)
    widths = 0.10 + 0.12 * u(class_count)
    colours = 0.25 + 0.75 * u(class_count, channels)
    grad_dir = u(class_count) * 2 * np.pi
    labels = np.arange(n) % class_count
    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    jitter = 0.06 * (u(n, 2) - 0.5)
    noise = 0.04 * (u(n, image_size, image_size, channels) - 0.5)
    images = np.empty((n, image_size, image_size, channels))
    for i, c in enumerate(labels):
        cy, cx = centres[c] + jitter[i]
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * widths[c] ** 2))
        ramp = 0.15 + 0.1 * (np.cos(grad_dir[c]) * xx + np.sin(grad_dir[c]) * yy)
        images[i] = ramp[..., None] + blob[..., None] * colours[c] + noise[i]
    return Dataset(np.clip(images, 0.0, 1.0), labels, class_count, "train")


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled split; the first part holds ``round(fraction * n)`` items."""
    perm = rng.random_permutation(rng.philox(rng.derive_seed(seed, 0x5711)), n)
    k = int(round(fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


def balanced_subset(dataset: Dataset, classes, per_class: int, seed: int,
                    offset: int = 0) -> Dataset:
    """``per_class`` images of each listed class, relabelled 0..len(classes)-1.

    ``offset`` skips that many shuffled images per class, which gives disjoint
    train/test subsets from the same seed.
    """
    if dataset.labels is None:
        raise ValueError("dataset has no labels")
    picks, new_labels = [], []
    for new, c in enumerate(classes):
        idx = np.flatnonzero(dataset.labels == c)
        perm = rng.random_permutation(rng.philox(rng.derive_seed(seed, 0xBA1, int(c))), idx.size)
        chosen = idx[perm[offset:offset + per_class]]
        if chosen.size < per_class:
            raise ValueError(f"class {c} has only {idx.size} images")
        picks.append(chosen)
        new_labels.append(np.full(per_class, new))
    picks = np.concatenate(picks)
    return Dataset(dataset.images[picks], np.concatenate(new_labels), len(classes),
                   dataset.split, dataset.stats)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :]


def random_resized_crop(image: np.ndarray, bitgen, scale=(0.67, 1.0),
                        ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    """Crop a random area/aspect window and resize back by nearest neighbour."""
    H, W, _ = image.shape
    for _ in range(10):
        r = rng.uniform01(bitgen, (4,))
        area = H * W * (scale[0] + (scale[1] - scale[0]) * r[0])
        aspect = np.exp(np.log(ratio[0]) + (np.log(ratio[1]) - np.log(ratio[0])) * r[1])
        w = int(round(np.sqrt(area * aspect)))
        h = int(round(np.sqrt(area / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(r[2] * (H - h + 1))
            left = int(r[3] * (W - w + 1))
            rows = top + (np.arange(H) * h // H)
            cols = left + (np.arange(W) * w // W)
            return image[rows][:, cols]
    return image
