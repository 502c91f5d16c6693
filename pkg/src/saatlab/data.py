"""Dataset ingestion, augmentation and deterministic batching.

Loaders parse the official on-disk formats byte-exactly:

  MNIST IDX   big-endian magic 0x00000803 (images, N x H x W bytes) and
              0x00000801 (labels, N bytes); files may be gzip-compressed.
  CIFAR-10    data_batch_{1..5}.bin + test_batch.bin, 10000 records of
              3073 bytes each: label byte then 3072 RGB bytes plane-major.

Pixels are mapped to [0, 1] as raw_byte / 255 with no further shift, so a
perturbation budget of 8/255 means exactly 8 raw byte steps.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import stream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_PER_FILE = 10000

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DataError(Exception):
    """Malformed dataset file or invalid request."""


@dataclass
class Dataset:
    name: str
    split: str
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def class_count(self) -> int:
        return 10

    def subset(self, n: int | None) -> "Dataset":
        """First n examples in official file order (deterministic)."""
        if n is None or n >= len(self):
            return self
        if n < 1:
            raise DataError(f"subset size must be >= 1, got {n}")
        return Dataset(self.name, self.split, self.images[:n], self.labels[:n])


def _read_file(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        with gzip.open(gz, "rb") as fh:
            return fh.read()
    raise DataError(f"missing dataset file {path} (also tried {gz.name})")


def _parse_idx_images(raw: bytes, origin: str) -> np.ndarray:
    if len(raw) < 16:
        raise DataError(f"{origin}: truncated IDX image header")
    magic, n, h, w = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise DataError(f"{origin}: bad magic 0x{magic:08x} for IDX images (want 0x{IDX_IMAGE_MAGIC:08x})")
    if len(raw) != 16 + n * h * w:
        raise DataError(f"{origin}: IDX image payload is {len(raw) - 16} bytes, header promises {n * h * w}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, h, w)


def _parse_idx_labels(raw: bytes, origin: str) -> np.ndarray:
    if len(raw) < 8:
        raise DataError(f"{origin}: truncated IDX label header")
    magic, n = struct.unpack_from(">II", raw, 0)
    if magic != IDX_LABEL_MAGIC:
        raise DataError(f"{origin}: bad magic 0x{magic:08x} for IDX labels (want 0x{IDX_LABEL_MAGIC:08x})")
    if len(raw) != 8 + n:
        raise DataError(f"{origin}: IDX label payload is {len(raw) - 8} bytes, header promises {n}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if labels.size and labels.max() >= 10:
        raise DataError(f"{origin}: label {labels.max()} out of range (>= 10)")
    return labels


def _to_unit(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / np.float32(255)


def load_mnist(data_dir) -> tuple[Dataset, Dataset]:
    """Load the MNIST train/test splits from a directory of IDX files."""
    root = Path(data_dir)
    out = []
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        images = _parse_idx_images(_read_file(root / img_name), img_name)
        labels = _parse_idx_labels(_read_file(root / lbl_name), lbl_name)
        if images.shape[0] != labels.shape[0]:
            raise DataError(
                f"{img_name}: {images.shape[0]} images but {labels.shape[0]} labels in {lbl_name}")
        out.append(Dataset("mnist", split, _to_unit(images)[:, None, :, :],
                           labels.astype(np.int64)))
    return out[0], out[1]


def _parse_cifar_file(raw: bytes, origin: str) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD != 0:
        raise DataError(f"{origin}: file length {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record (truncated?)")
    n = len(raw) // CIFAR_RECORD
    if n != CIFAR_PER_FILE:
        raise DataError(f"{origin}: expected {CIFAR_PER_FILE} records, found {n}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.max() >= 10:
        raise DataError(f"{origin}: label {labels.max()} out of range (>= 10)")
    images = rec[:, 1:].reshape(n, 3, 32, 32)
    return images, labels


def load_cifar10(data_dir) -> tuple[Dataset, Dataset]:
    """Load the CIFAR-10 binary batches from a directory."""
    root = Path(data_dir)
    imgs, lbls = [], []
    for name in CIFAR_TRAIN_FILES:
        im, lb = _parse_cifar_file(_read_file(root / name), name)
        imgs.append(im)
        lbls.append(lb)
    train = Dataset("cifar10", "train", _to_unit(np.concatenate(imgs)),
                    np.concatenate(lbls).astype(np.int64))
    im, lb = _parse_cifar_file(_read_file(root / CIFAR_TEST_FILE), CIFAR_TEST_FILE)
    test = Dataset("cifar10", "test", _to_unit(im), lb.astype(np.int64))
    return train, test


LOADERS = {"mnist": load_mnist, "cifar10": load_cifar10}


def load(name: str, data_dir) -> tuple[Dataset, Dataset]:
    if name not in LOADERS:
        raise DataError(f"unknown dataset {name!r}; expected one of {sorted(LOADERS)}")
    return LOADERS[name](data_dir)


# ---------------------------------------------------------------------------
# augmentation


def hflip(images: np.ndarray) -> np.ndarray:
    """Horizontal mirror; an involution."""
    return images[..., ::-1].copy()


def augment(images: np.ndarray, crop_pad: int, use_hflip: bool,
            rng: np.random.Generator) -> np.ndarray:
    """Random crop from zero-padded images, then per-image coin-flip mirror.

    crop_pad = 0 with use_hflip = False is the identity.  Offsets are
    uniform over {0..2*crop_pad}^2; outputs stay in [0, 1].
    """
    if crop_pad < 0:
        raise DataError(f"crop_pad must be >= 0, got {crop_pad}")
    if crop_pad == 0 and not use_hflip:
        return images
    n, _, h, w = images.shape
    out = images
    if crop_pad:
        padded = np.pad(images, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)))
        offsets = rng.integers(0, 2 * crop_pad + 1, size=(n, 2))
        out = np.empty_like(images)
        for i in range(n):
            r, c = offsets[i]
            out[i] = padded[i, :, r : r + h, c : c + w]
    if use_hflip:
        flips = rng.random(n) < 0.5
        out = out.copy() if out is images else out
        out[flips] = out[flips][..., ::-1]
    return out


# ---------------------------------------------------------------------------
# batching


@dataclass
class BatchStream:
    """Deterministic shuffled batches; order is a pure function of (seed, epoch)."""

    dataset: Dataset
    batch_size: int
    seed: int
    crop_pad: int = 0
    use_hflip: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")

    def batches_per_epoch(self) -> int:
        n = len(self.dataset)
        return (n + self.batch_size - 1) // self.batch_size

    def epoch(self, epoch: int):
        """Yield (indices, images, labels); each index appears exactly once."""
        n = len(self.dataset)
        perm = stream(self.seed, "shuffle", epoch).permutation(n)
        for b in range(self.batches_per_epoch()):
            idx = perm[b * self.batch_size : (b + 1) * self.batch_size]
            images = self.dataset.images[idx]
            if self.crop_pad or self.use_hflip:
                images = augment(images, self.crop_pad, self.use_hflip,
                                 stream(self.seed, "augment", epoch, b))
            yield idx, images, self.dataset.labels[idx]
