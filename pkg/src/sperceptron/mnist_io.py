"""IDX (MNIST) file parsing, pixel normalization and seeded batching.

IDX layout, all integers big-endian::

    [0:4]   magic      0x00000803 images / 0x00000801 labels
    [4:8]   dim 0      item count
    ...     dim k      one 4-byte extent per dimension
    [...]   payload    unsigned bytes, row-major
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    EmptyDatasetError,
    LabelOutOfRangeError,
    TruncatedError,
)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
NUM_CLASSES = 10

_GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dims: tuple[int, ...]

    @property
    def size(self) -> int:
        """Header length in bytes."""
        return 4 + 4 * len(self.dims)

    @property
    def payload_size(self) -> int:
        return int(np.prod(self.dims, dtype=np.int64)) if self.dims else 0


def parse_idx_header(data: bytes, expected_magic: int, ndim: int) -> IdxHeader:
    if len(data) < 4:
        raise TruncatedError(f"IDX header needs 4 bytes, got {len(data)}")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise BadMagicError(f"expected magic {expected_magic}, found {magic}")
    end = 4 + 4 * ndim
    if len(data) < end:
        raise TruncatedError(f"IDX header needs {end} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:end])
    return IdxHeader(magic, tuple(dims))


def _payload(data: bytes, header: IdxHeader) -> np.ndarray:
    need = header.payload_size
    have = len(data) - header.size
    if have < need:
        raise TruncatedError(f"payload has {have} bytes, header promises {need}")
    if have > need:
        raise DataError(f"{have - need} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=header.size)


def parse_idx_images(data: bytes) -> tuple[int, int, np.ndarray]:
    """Parse an image file into ``(rows, cols, pixels)``.

    ``pixels`` is a read-only uint8 array of shape (N, rows*cols); each image is
    flattened row-major, which is the order the bytes appear on disk.
    """
    header = parse_idx_header(data, IMAGE_MAGIC, 3)
    count, rows, cols = header.dims
    pixels = _payload(data, header).reshape(count, rows * cols)
    return rows, cols, pixels


def parse_idx_labels(data: bytes) -> np.ndarray:
    header = parse_idx_header(data, LABEL_MAGIC, 1)
    labels = _payload(data, header)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise LabelOutOfRangeError(
            f"label {int(labels[bad[0]])} at index {int(bad[0])} is not a digit class"
        )
    return labels


def serialize_idx_images(pixels: np.ndarray, rows: int, cols: int) -> bytes:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    count = pixels.shape[0]
    if pixels.size != count * rows * cols:
        raise ValueError("pixel array does not match rows*cols")
    return struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols) + pixels.tobytes()


def serialize_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABEL_MAGIC, labels.shape[0]) + labels.tobytes()


def read_file_bytes(path: str | os.PathLike) -> bytes:
    """Read a file, transparently gunzipping it when it starts with the gzip magic."""
    raw = Path(path).read_bytes()
    if raw[:2] == _GZIP_MAGIC:
        return gzip.decompress(raw)
    return raw


def normalize(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 255.0


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, n) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, 9]

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64, ndmin=2)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if images.shape[0] != labels.shape[0]:
            raise ValueError(
                f"{images.shape[0]} images but {labels.shape[0]} labels"
            )
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n(self) -> int:
        return self.images.shape[1]

    def take(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices])

    def subset(self, k: int, seed: int) -> "LabeledDataset":
        """First ``k`` items after a seeded shuffle."""
        order = np.random.default_rng(seed).permutation(len(self))
        return self.take(order[:k])


def load_dataset(images_path, labels_path) -> LabeledDataset:
    _, _, pixels = parse_idx_images(read_file_bytes(images_path))
    labels = parse_idx_labels(read_file_bytes(labels_path))
    return LabeledDataset(normalize(pixels), labels)


_SPLIT_PREFIX = {"train": "train", "test": "t10k"}


def find_mnist_files(data_dir, split: str) -> tuple[Path, Path]:
    """Locate the image and label files for ``split`` under ``data_dir``.

    Accepts the usual spellings: ``train-images-idx3-ubyte``,
    ``train-images.idx3-ubyte``, each optionally with ``.gz``.
    """
    prefix = _SPLIT_PREFIX[split]
    data_dir = Path(data_dir)
    found = []
    for kind, idx in (("images", "idx3"), ("labels", "idx1")):
        for sep in ("-", "."):
            for ext in ("", ".gz"):
                cand = data_dir / f"{prefix}-{kind}{sep}{idx}-ubyte{ext}"
                if cand.exists():
                    break
            else:
                continue
            break
        else:
            raise FileNotFoundError(
                f"no {split} {kind} file in {data_dir} "
                f"(looked for {prefix}-{kind}-{idx}-ubyte[.gz])"
            )
        found.append(cand)
    return found[0], found[1]


def load_mnist(data_dir, split: str) -> LabeledDataset:
    return load_dataset(*find_mnist_files(data_dir, split))


def batches(dataset, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    """Seeded shuffle of all item indices, cut into consecutive chunks.

    ``dataset`` may be a LabeledDataset or an item count. The last chunk keeps
    the remainder. Different ``epoch`` values give independent permutations.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    count = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if count == 0:
        raise EmptyDatasetError("cannot batch an empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]
