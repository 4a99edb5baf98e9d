"""Datasets: desk-scale synthetic images and the CIFAR-10 binary format."""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np

DATA_DIR_ENV = "FGSMSDI_DATA_DIR"

CIFAR_SHAPE = (3, 32, 32)
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10

DEFAULT_NOISE = 1.0


@dataclass
class Dataset:
    images: np.ndarray  # [M, C, H, W] in [0, 1]
    labels: np.ndarray  # [M] int64
    num_classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.split,
                       self.provenance)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.num_classes, self.split,
                       self.provenance)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None
                ) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Yield ``(x, y)`` batches, shuffled when ``rng`` is given; the last may be short."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def synth_dataset(num_classes: int = 10, size: int = 2000,
                  image_shape: Tuple[int, int, int] = (3, 16, 16),
                  noise: float = DEFAULT_NOISE, seed: int = 0, split: str = "train",
                  dtype=np.float32) -> Dataset:
    """Class templates plus uniform pixel noise.

    Each class gets a fixed random template in ``[0, 1]`` (drawn from ``seed``
    alone, so train and test splits share them); a sample is
    ``clip(template + U(-noise, noise), 0, 1)``. Classes are balanced and the
    samples are returned in shuffled order.
    """
    if num_classes < 1 or size < 1:
        raise ValueError("need at least one class and one sample")
    if size % num_classes:
        raise ValueError(f"size {size} is not divisible by the number of classes {num_classes}")
    if noise < 0:
        raise ValueError(f"noise level must be non-negative, got {noise}")
    templates = np.random.default_rng(seed).random((num_classes, *image_shape))
    keys = {"train": 0, "test": 1}
    split_key = keys[split] if split in keys else zlib.crc32(split.encode()) + 2
    rng = np.random.default_rng([seed, split_key])
    labels = np.repeat(np.arange(num_classes), size // num_classes)
    labels = labels[rng.permutation(size)]
    images = templates[labels] + rng.uniform(-noise, noise, (size, *image_shape))
    images = np.clip(images, 0.0, 1.0).astype(dtype)
    return Dataset(images, labels.astype(np.int64), num_classes, split,
                   f"synthetic(seed={seed}, noise={noise})")


def load_cifar_binary(path: Union[str, Path], count: Optional[int] = None,
                      dtype=np.float32) -> Dataset:
    """Parse CIFAR-10 binary records (1 label byte + 3072 channel-major pixel bytes).

    ``count`` limits the read to the first ``count`` records and must not exceed
    what the file holds.
    """
    path = Path(path)
    raw = path.read_bytes()
    available = len(raw) // CIFAR_RECORD
    if count is None:
        if len(raw) % CIFAR_RECORD:
            raise ValueError(f"{path}: truncated record at byte offset {available * CIFAR_RECORD}")
        count = available
    elif count > available:
        if len(raw) % CIFAR_RECORD:
            raise ValueError(f"{path}: truncated record at byte offset {available * CIFAR_RECORD}")
        raise ValueError(f"{path}: requested {count} records but the file holds {available}")
    if count < 1:
        raise ValueError(f"{path}: no records to read")
    recs = np.frombuffer(raw, np.uint8, count * CIFAR_RECORD).reshape(count, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{path}: label byte {labels[i]} > 9 at byte offset {i * CIFAR_RECORD}")
    images = (recs[:, 1:].reshape(count, *CIFAR_SHAPE).astype(np.float64) / 255.0).astype(dtype)
    return Dataset(images, labels, CIFAR_CLASSES, path.stem, f"cifar-binary({path.name})")


def write_cifar_binary(path: Union[str, Path], pixels: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`load_cifar_binary` for uint8 ``pixels [M, 3, 32, 32]``."""
    pixels = np.asarray(pixels, np.uint8).reshape(len(labels), -1)
    if pixels.shape[1] != CIFAR_RECORD - 1:
        raise ValueError(f"expected {CIFAR_RECORD - 1} pixel bytes per record")
    recs = np.concatenate([np.asarray(labels, np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(recs.tobytes())


def save_npz(path: Union[str, Path], ds: Dataset) -> None:
    np.savez(path, images=ds.images, labels=ds.labels, num_classes=ds.num_classes)


def load_npz(path: Union[str, Path], split: str = "") -> Dataset:
    with np.load(path) as z:
        return Dataset(z["images"], z["labels"].astype(np.int64), int(z["num_classes"]),
                       split or Path(path).stem, f"npz({Path(path).name})")


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def load_dataset_dir(path: Union[str, Path]) -> Tuple[Dataset, Dataset]:
    """Train/test pair from a directory holding ``train.npz``/``test.npz`` or CIFAR batches."""
    path = Path(path)
    if (path / "train.npz").exists():
        return load_npz(path / "train.npz", "train"), load_npz(path / "test.npz", "test")
    if (path / "cifar-10-batches-bin").is_dir():
        path = path / "cifar-10-batches-bin"
    train_files = sorted(path.glob("data_batch_*.bin"))
    if not train_files or not (path / "test_batch.bin").exists():
        raise FileNotFoundError(f"{path}: no train.npz/test.npz or CIFAR-10 binary batches found")
    parts = [load_cifar_binary(f) for f in train_files]
    train = Dataset(np.concatenate([p.images for p in parts]),
                    np.concatenate([p.labels for p in parts]), CIFAR_CLASSES, "train",
                    f"cifar-binary({path})")
    test = load_cifar_binary(path / "test_batch.bin")
    test.split = "test"
    return train, test
