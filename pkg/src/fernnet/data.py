"""MNIST IDX files, class-balanced batches and additive noise augmentation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .tensor import DTYPE

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    classes: int = CLASSES
    by_class: list = field(init=False)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        self.by_class = [np.flatnonzero(self.labels == c) for c in range(self.classes)]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.classes)


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"truncated {what} header", len(raw))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise DataError(f"bad {what} magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"truncated {what} header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise DataError(f"truncated {what} data: expected {size} bytes", len(raw))
    if len(raw) > header + size:
        raise DataError(f"trailing bytes after {what} data", header + size)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label pair; pixel bytes are scaled by 1/255."""
    images = _parse_idx(_read(images_path), IMAGES_MAGIC, 3, "image")
    labels = _parse_idx(_read(labels_path), LABELS_MAGIC, 1, "label")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    if labels.size and labels.max() >= CLASSES:
        bad = int(np.argmax(labels >= CLASSES))
        raise DataError(f"label {labels[bad]} out of range", 8 + bad)
    pixels = images.astype(DTYPE) / DTYPE(255.0)
    return Dataset(pixels[:, None, :, :], labels.astype(np.int64))


def encode_idx(images: np.ndarray, labels: np.ndarray) -> tuple[bytes, bytes]:
    """Inverse of :func:`load_idx` for images that came from bytes."""
    n, _, h, w = images.shape
    pixels = np.rint(images[:, 0] * 255.0).astype(np.uint8)
    img = struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + pixels.tobytes()
    lab = struct.pack(">II", LABELS_MAGIC, n) + labels.astype(np.uint8).tobytes()
    return img, lab


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    img, lab = encode_idx(images, labels)
    Path(images_path).write_bytes(img)
    Path(labels_path).write_bytes(lab)


def load_mnist(data_dir, split: str) -> Dataset:
    images, labels = MNIST_FILES[split]
    data_dir = Path(data_dir)
    if not (data_dir / images).exists():
        raise DataError(f"MNIST {split} files not found in {data_dir}")
    return load_idx(data_dir / images, data_dir / labels)


class BalancedSampler:
    """Yields index batches with ``batch_size / classes`` samples per class.

    Each class is walked through its own shuffled order without replacement;
    when a class runs out it is reshuffled and a new cycle starts.
    """

    def __init__(self, dataset: Dataset, batch_size: int, rng: np.random.Generator):
        if batch_size <= 0 or batch_size % dataset.classes:
            raise ConfigError(f"batch size {batch_size} is not a positive multiple of "
                              f"{dataset.classes} classes")
        if any(len(members) == 0 for members in dataset.by_class):
            raise ConfigError("every class needs at least one sample for balanced batches")
        self.dataset = dataset
        self.per_class = batch_size // dataset.classes
        self.rng = rng
        self._order = [rng.permutation(members) for members in dataset.by_class]
        self._cursor = [0] * dataset.classes

    def _take(self, c: int) -> np.ndarray:
        picked = []
        need = self.per_class
        while need:
            order = self._order[c]
            start = self._cursor[c]
            chunk = order[start:start + need]
            picked.append(chunk)
            need -= chunk.size
            self._cursor[c] += chunk.size
            if self._cursor[c] == order.size:
                self._order[c] = self.rng.permutation(self.dataset.by_class[c])
                self._cursor[c] = 0
        return np.concatenate(picked)

    def next_indices(self) -> np.ndarray:
        return np.concatenate([self._take(c) for c in range(self.dataset.classes)])

    def next_batch(self):
        idx = self.next_indices()
        return self.dataset.images[idx], self.dataset.labels[idx]


def balanced_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator):
    """A single balanced batch ``(images, labels)``."""
    return BalancedSampler(dataset, batch_size, rng).next_batch()


def augment_noise(images: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Add uniform noise of a per-image random amplitude up to ``fraction``.

    Amplitude ``a ~ U(0, fraction)`` per image, pixel noise ``U(-a, a)``,
    result clipped to [0, 1].
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"noise fraction must lie in [0, 1], got {fraction}")
    if fraction == 0.0:
        return images.copy()
    n = images.shape[0]
    amp = rng.uniform(0.0, fraction, size=(n,) + (1,) * (images.ndim - 1))
    noise = rng.uniform(-1.0, 1.0, size=images.shape) * amp
    return np.clip(images + noise.astype(images.dtype), 0.0, 1.0).astype(images.dtype)
