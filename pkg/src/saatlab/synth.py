"""Synthetic datasets written in the official on-disk formats.

Useful when the real files are not on hand: `write_mnist_like` renders a
deterministic, learnable 10-class digit-glyph dataset into MNIST IDX
files, and `write_cifar_like` emits structurally exact CIFAR-10 binary
batches.  Both go through the same loaders as the real data.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .data import CIFAR_PER_FILE, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, MNIST_FILES
from .rng import stream

# 5x7 digit glyphs; '#' marks stroke pixels
_GLYPHS = {
    0: (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    1: ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    2: (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    3: (" ### ", "#   #", "    #", "  ## ", "    #", "#   #", " ### "),
    4: ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    5: ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    6: (" ### ", "#    ", "#    ", "#### ", "#   #", "#   #", " ### "),
    7: ("#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "),
    8: (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    9: (" ### ", "#   #", "#   #", " ####", "    #", "    #", " ### "),
}


def _glyph_masks(scale: int = 3) -> np.ndarray:
    masks = np.zeros((10, 7, 5), dtype=np.float32)
    for digit, rows in _GLYPHS.items():
        for r, row in enumerate(rows):
            for c, ch in enumerate(row):
                if ch == "#":
                    masks[digit, r, c] = 1.0
    return np.kron(masks, np.ones((scale, scale), dtype=np.float32))  # (10, 21, 15)


def render_digits(n: int, seed: int, side: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """n jittered noisy glyph images as uint8 (n, side, side) plus labels.

    Stroke contrast is kept moderate so small l-infinity perturbations can
    genuinely flip predictions: an undefended classifier reaches high clean
    accuracy here but loses most of it under attack, like on real digits.
    """
    rng = stream(seed, "synth-digits")
    masks = _glyph_masks()
    gh, gw = masks.shape[1:]
    labels = rng.integers(0, 10, size=n)
    rows = rng.integers(0, side - gh + 1, size=n)
    cols = rng.integers(0, side - gw + 1, size=n)
    intensity = rng.uniform(0.42, 0.72, size=n).astype(np.float32)
    background = rng.uniform(0.0, 0.18, size=n).astype(np.float32)
    images = np.zeros((n, side, side), dtype=np.float32)
    for i in range(n):
        r, c = rows[i], cols[i]
        images[i] = background[i]
        images[i, r : r + gh, c : c + gw] += masks[labels[i]] * intensity[i]
    noise = rng.normal(0.0, 0.11, size=images.shape).astype(np.float32)
    images = np.clip(images + noise, 0.0, 1.0)
    return np.round(images * 255).astype(np.uint8), labels.astype(np.uint8)


def _write_idx_images(path: Path, images: np.ndarray, compress: bool) -> None:
    n, h, w = images.shape
    payload = struct.pack(">IIII", 0x00000803, n, h, w) + images.tobytes()
    _write(path, payload, compress)


def _write_idx_labels(path: Path, labels: np.ndarray, compress: bool) -> None:
    payload = struct.pack(">II", 0x00000801, labels.shape[0]) + labels.tobytes()
    _write(path, payload, compress)


def _write(path: Path, payload: bytes, compress: bool) -> None:
    if compress:
        with gzip.open(path.with_name(path.name + ".gz"), "wb") as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def write_mnist_like(out_dir, n_train: int = 60000, n_test: int = 10000,
                     seed: int = 0, compress: bool = False) -> Path:
    """Write a synthetic digit dataset in MNIST IDX layout; returns the dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, n, s in (("train", n_train, seed), ("test", n_test, seed + 1)):
        images, labels = render_digits(n, s)
        img_name, lbl_name = MNIST_FILES[split]
        _write_idx_images(out / img_name, images, compress)
        _write_idx_labels(out / lbl_name, labels, compress)
    return out


def write_cifar_like(out_dir, seed: int = 0) -> Path:
    """Write structurally exact CIFAR-10 binary batches with random content."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = stream(seed, "synth-cifar")
    for name in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,):
        labels = rng.integers(0, 10, size=(CIFAR_PER_FILE, 1)).astype(np.uint8)
        pixels = rng.integers(0, 256, size=(CIFAR_PER_FILE, 3072)).astype(np.uint8)
        (out / name).write_bytes(np.hstack([labels, pixels]).tobytes())
    return out
