"""Datasets: a seeded synthetic image generator and IDX file ingestion.

The synthetic generator produces class-conditional gaussian blobs rendered
as uint8 images, which is enough signal for every architecture shipped
here while keeping the whole test suite free of downloads.  IDX is the
classic big-endian image/label container (magic 0x00000803 for images,
0x00000801 for labels); parse errors always report the byte offset.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import REAL, rng_for

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "test-images-idx3-ubyte"
TEST_LABELS = "test-labels-idx1-ubyte"
META_FILE = "dataset.json"


class IdxFormatError(ValueError):
    """Malformed IDX file; message carries the byte offset of the problem."""


@dataclass
class Dataset:
    """A split of normalized float32 images with integer labels."""

    images: np.ndarray   # (N, C, H, W) float32, already normalized
    labels: np.ndarray   # (N,) int64
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"image count {self.images.shape[0]} != label count {self.labels.shape[0]}"
            )

    def __len__(self):
        return self.images.shape[0]

    @property
    def flat_images(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


# ---------------------------------------------------------------------------
# synthetic generator


def make_synthetic(classes: int = 10, shape=(1, 28, 28), train_count: int = 2000,
                   test_count: int = 1000, noise: float = 0.35, modes_per_class: int = 1,
                   seed: int = 0):
    """Gaussian-blob classes rendered to uint8 images.

    Each class owns ``modes_per_class`` smoothed prototype images; a sample
    is a random mode plus pixel noise, clipped to [0, 255].  ``noise`` is
    the noise std as a fraction of full scale.  Returns
    (train_images_u8, train_labels, test_images_u8, test_labels).
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    gen = rng_for(seed)
    c, h, w = shape
    protos = gen.normal(0.0, 1.0, size=(classes, modes_per_class, c, h, w))
    # cheap smoothing so prototypes have spatial structure for the conv nets
    for _ in range(2):
        protos = 0.5 * protos + 0.125 * (
            np.roll(protos, 1, axis=-1) + np.roll(protos, -1, axis=-1)
            + np.roll(protos, 1, axis=-2) + np.roll(protos, -1, axis=-2)
        )
    protos = (protos - protos.mean()) / (protos.std() + 1e-8)

    def draw(count):
        labels = gen.integers(0, classes, size=count)
        modes = gen.integers(0, modes_per_class, size=count)
        base = protos[labels, modes]
        samples = base + noise * gen.normal(0.0, 1.0, size=base.shape)
        u8 = np.clip((samples * 0.25 + 0.5) * 255.0, 0, 255).astype(np.uint8)
        return u8, labels.astype(np.int64)

    train_x, train_y = draw(train_count)
    test_x, test_y = draw(test_count)
    return train_x, train_y, test_x, test_y


def normalize(images_u8: np.ndarray, mean: float, std: float) -> np.ndarray:
    x = images_u8.astype(REAL) / REAL(255.0)
    return ((x - REAL(mean)) / REAL(std)).astype(REAL)


# ---------------------------------------------------------------------------
# IDX reading / writing


def _read_exact(f, count: int, what: str):
    data = f.read(count)
    if len(data) != count:
        raise IdxFormatError(
            f"truncated IDX file: wanted {count} bytes for {what} at offset "
            f"{f.tell() - len(data)}, got {len(data)}"
        )
    return data


def load_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"bad image magic 0x{magic:08x} at offset 0 in {path} "
                f"(expected 0x{IDX_IMAGES_MAGIC:08x})"
            )
        count, rows, cols = struct.unpack(">III", _read_exact(f, 12, "header"))
        payload = _read_exact(f, count * rows * cols, f"{count} images of {rows}x{cols}")
        extra = f.read(1)
        if extra:
            raise IdxFormatError(f"trailing bytes at offset {f.tell() - 1} in {path}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, = struct.unpack(">I", _read_exact(f, 4, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"bad label magic 0x{magic:08x} at offset 0 in {path} "
                f"(expected 0x{IDX_LABELS_MAGIC:08x})"
            )
        count, = struct.unpack(">I", _read_exact(f, 4, "header"))
        payload = _read_exact(f, count, f"{count} labels")
        extra = f.read(1)
        if extra:
            raise IdxFormatError(f"trailing bytes at offset {f.tell() - 1} in {path}")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def save_idx_images(path: str, images_u8: np.ndarray):
    if images_u8.ndim == 4:
        if images_u8.shape[1] != 1:
            raise ValueError("IDX stores single-channel images only")
        images_u8 = images_u8[:, 0]
    n, rows, cols = images_u8.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())


def save_idx_labels(path: str, labels: np.ndarray):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def ingest_idx(images_path: str, labels_path: str, mean: float = 0.5, std: float = 0.5,
               split: str = "train", channels: int = 1) -> Dataset:
    """Load one IDX image/label pair into a normalized Dataset."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} ({images_path}) != "
            f"label count {labels.shape[0]} ({labels_path})"
        )
    x = normalize(images, mean, std)[:, None, :, :]
    if channels != 1:
        raise ValueError("only single-channel IDX data is supported")
    return Dataset(images=x, labels=labels, split=split)


# ---------------------------------------------------------------------------
# dataset directories (what the CLI reads and writes)


def write_dataset_dir(outdir: str, train_x, train_y, test_x, test_y,
                      mean: float = 0.5, std: float = 0.5, meta: dict | None = None):
    os.makedirs(outdir, exist_ok=True)
    save_idx_images(os.path.join(outdir, TRAIN_IMAGES), train_x)
    save_idx_labels(os.path.join(outdir, TRAIN_LABELS), train_y)
    save_idx_images(os.path.join(outdir, TEST_IMAGES), test_x)
    save_idx_labels(os.path.join(outdir, TEST_LABELS), test_y)
    info = {"mean": mean, "std": std, "classes": int(np.max(train_y)) + 1}
    info.update(meta or {})
    with open(os.path.join(outdir, META_FILE), "w") as f:
        json.dump(info, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset_dir(data_dir: str):
    """Returns (train Dataset, test Dataset, meta dict).

    Missing files are reported all at once so the caller sees the full
    expected layout.
    """
    expected = [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]
    missing = [n for n in expected if not os.path.exists(os.path.join(data_dir, n))]
    if missing:
        raise FileNotFoundError(
            f"dataset directory {data_dir} is missing {', '.join(missing)} "
            f"(expected files: {', '.join(expected)})"
        )
    meta_path = os.path.join(data_dir, META_FILE)
    meta = {"mean": 0.5, "std": 0.5}
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta.update(json.load(f))
    train = ingest_idx(os.path.join(data_dir, TRAIN_IMAGES), os.path.join(data_dir, TRAIN_LABELS),
                       mean=meta["mean"], std=meta["std"], split="train")
    test = ingest_idx(os.path.join(data_dir, TEST_IMAGES), os.path.join(data_dir, TEST_LABELS),
                      mean=meta["mean"], std=meta["std"], split="test")
    return train, test, meta
