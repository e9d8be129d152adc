#!/usr/bin/env python3
"""
MNIST Loader - big-endian IDX image/label files

File layout:

    images: >I magic 0x00000803 | >I count | >I rows | >I cols | u8 pixels
    labels: >I magic 0x00000801 | >I count | u8 labels

Both plain and gzip-compressed (*.gz) files are accepted.

Usage:
    from src.tools.mnist import load_mnist_idx, find_mnist_files

    images, labels = find_mnist_files(data_root, split="train")
    train = load_mnist_idx(images, labels, subset_n=10000, seed=0)
    print(train.n, train.images.shape)
"""

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np

from .rng import CounterStream

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DATA_ROOT_ENV = "FFTKF_DATA_ROOT"
DEFAULT_DATA_ROOT = Path("./data/mnist")

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

PathLike = Union[str, os.PathLike]


class IdxFormatError(ValueError):
    """Malformed IDX file."""


class IdxMagicMismatch(IdxFormatError):
    pass


class IdxTruncatedFile(IdxFormatError):
    pass


class IdxCountMismatch(IdxFormatError):
    pass


@dataclass(frozen=True)
class MnistDataset:
    """N x 784 images in [0, 1] and N integer labels in [0, 9]."""
    images: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    split: str = "train"

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, n: int, seed: int = 0) -> "MnistDataset":
        """Seeded subset of n examples; the chosen indices keep file order."""
        if n >= self.n:
            return self
        order = CounterStream(seed, "data").permutation(self.n)
        idx = np.sort(order[:n])
        return MnistDataset(images=self.images[idx], labels=self.labels[idx], split=self.split)


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_header(raw: bytes, path: Path, magic: int, n_dims: int) -> tuple[int, ...]:
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise IdxTruncatedFile(f"{path}: {len(raw)} bytes, header needs {header_len}")
    found, *dims = struct.unpack(">" + "I" * (1 + n_dims), raw[:header_len])
    if found != magic:
        raise IdxMagicMismatch(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return tuple(dims)


def read_idx_images(path: PathLike) -> np.ndarray:
    """uint8 array of shape (N, rows, cols)."""
    path = Path(path)
    raw = _read_bytes(path)
    count, rows, cols = _parse_header(raw, path, IMAGE_MAGIC, 3)
    expected = count * rows * cols
    body = raw[16:]
    if len(body) < expected:
        raise IdxTruncatedFile(f"{path}: {len(body)} pixel bytes, header promises {expected}")
    return np.frombuffer(body, dtype=np.uint8, count=expected).reshape(count, rows, cols)


def read_idx_labels(path: PathLike) -> np.ndarray:
    """uint8 array of shape (N,)."""
    path = Path(path)
    raw = _read_bytes(path)
    (count,) = _parse_header(raw, path, LABEL_MAGIC, 1)
    body = raw[8:]
    if len(body) < count:
        raise IdxTruncatedFile(f"{path}: {len(body)} label bytes, header promises {count}")
    return np.frombuffer(body, dtype=np.uint8, count=count)


def load_mnist_idx(
    path_images: PathLike,
    path_labels: PathLike,
    subset_n: Optional[int] = None,
    seed: int = 0,
    split: Literal["train", "test"] = "train",
) -> MnistDataset:
    """
    Parse an IDX image/label pair.

    Raises:
        IdxMagicMismatch: a file carries the wrong magic number
        IdxTruncatedFile: a file is shorter than its header promises
        IdxCountMismatch: image and label counts differ
    """
    images = read_idx_images(path_images)
    labels = read_idx_labels(path_labels)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise IdxFormatError(f"{path_labels}: label {int(labels.max())} outside [0, 9]")

    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    dataset = MnistDataset(images=flat, labels=labels.astype(np.int64), split=split)
    if subset_n is not None:
        dataset = dataset.subset(subset_n, seed=seed)
    logger.info("Loaded %d %s examples from %s", dataset.n, split, path_images)
    return dataset


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, DEFAULT_DATA_ROOT))


def find_mnist_files(root: Optional[PathLike] = None, split: str = "train") -> Optional[tuple[Path, Path]]:
    """(images, labels) paths under root, plain or .gz; None when absent."""
    base = Path(root) if root is not None else data_root()
    names = SPLIT_FILES[split]
    for suffix in ("", ".gz"):
        candidates = tuple(base / f"{name}{suffix}" for name in names)
        if all(p.exists() for p in candidates):
            return candidates
    return None
