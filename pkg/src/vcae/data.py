"""MNIST-style ingestion: IDX parsing, static binarization, the standard
50000/10000/10000 partition, deterministic minibatching, half-image views,
and a deterministic synthetic corpus for desk-scale runs.

IDX format (big endian):
  u32  | magic (0x00000803 images, 0x00000801 labels)
  u32  | size of each dimension (3 dims for images, 1 for labels)
  u8[] | payload, row-major

Binarization is static: bits are fixed once (by threshold or by a single
seeded Bernoulli draw per pixel) and never resampled across epochs.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .nets import read_container, write_container
from .numerics import ContractViolation, RngStream, Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_DIM_CAP = 1 << 31  # any larger dimension is treated as a corrupt header

BINARIZE_MODES = ("threshold", "sample_once")


class IdxParseError(ValueError):
    """Malformed IDX bytes; the message carries the failing byte offset."""


class PartitionError(ValueError):
    pass


class DataFilesMissing(FileNotFoundError):
    pass


@dataclass
class Binarization:
    mode: str = "threshold"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in BINARIZE_MODES:
            raise ContractViolation(f"unknown binarization mode {self.mode!r}")

    def describe(self) -> str:
        return f"{self.mode}:{self.seed}" if self.mode == "sample_once" else self.mode


@dataclass
class Dataset:
    images: Tensor  # [count, dim], entries in {0.0, 1.0}
    split: str  # train | valid | test
    binarization: Binarization

    def __post_init__(self):
        if not np.all((self.images == 0.0) | (self.images == 1.0)):
            raise ContractViolation("dataset images must be binary")

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def parse_idx(data: bytes) -> Tensor:
    """Decode IDX bytes to a float64 array scaled to [0, 1]."""
    if len(data) < 4:
        raise IdxParseError(f"bad magic at byte 0: only {len(data)} bytes present")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise IdxParseError(f"bad magic 0x{magic:08x} at byte 0")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxParseError(f"truncated header at byte {len(data)}, need {header_end}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    total = 1
    for d in dims:
        if d >= _DIM_CAP:
            raise IdxParseError(f"dimension overflow at byte 4: size {d}")
        total *= d
        if total >= _DIM_CAP:
            raise IdxParseError(f"dimension overflow at byte 4: product {total}")
    expected_end = header_end + total
    if len(data) < expected_end:
        raise IdxParseError(
            f"truncated payload at byte {len(data)}, expected {expected_end}"
        )
    payload = np.frombuffer(data, dtype=np.uint8, count=total, offset=header_end)
    return payload.reshape(dims).astype(np.float64) / 255.0


def serialize_idx(array: np.ndarray, magic: int = IMAGE_MAGIC) -> bytes:
    """Inverse of parse_idx for synthetic files and round-trip tests."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    out = struct.pack(">I", magic)
    out += b"".join(struct.pack(">I", d) for d in arr.shape)
    return out + arr.tobytes()


# ---------------------------------------------------------------------------
# binarization / partition / batching
# ---------------------------------------------------------------------------


def binarize_static(images: Tensor, binarization: Binarization) -> Tensor:
    """Freeze grayscale [0,1] images into bits, per the descriptor."""
    if np.any(images < 0.0) or np.any(images > 1.0):
        raise ContractViolation("grayscale entries must lie in [0, 1]")
    if binarization.mode == "threshold":
        return (images >= 0.5).astype(np.float64)
    u = RngStream(seed=binarization.seed).uniform01(images.shape)
    return (u < images).astype(np.float64)


def partition(train_raw: Tensor):
    """First 50000 rows -> train, last 10000 -> valid, in file order."""
    if train_raw.shape[0] != 60000:
        raise PartitionError(
            f"expected 60000 raw training records, got {train_raw.shape[0]}"
        )
    return train_raw[:50000], train_raw[50000:]


def minibatches(count: int, batch_size: int, epoch_seed: int) -> list[np.ndarray]:
    """Deterministic index batches for one epoch; the short tail batch is kept."""
    if batch_size < 1:
        raise ContractViolation(f"batch_size must be >= 1, got {batch_size}")
    order = np.argsort(RngStream(seed=epoch_seed).uniform01((count,)), kind="stable")
    return [order[i : i + batch_size] for i in range(0, count, batch_size)]


def half_split(image: Tensor):
    """Top rows 0-13 and bottom rows 14-27 of a 784-long row-major image."""
    if image.shape != (784,):
        raise ContractViolation(f"half_split needs a 784-vector, got {image.shape}")
    return image[:392].copy(), image[392:].copy()


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


_STROKES = 24  # dictionary size
_CLASSES = 12
_STROKES_PER_CLASS = 6
_P_CLASS_STROKE = 0.9  # inclusion probability for a class's own strokes
_P_OFF_STROKE = 0.03  # stray strokes from outside the class
_FLIP_RATE = 0.015  # per-pixel noise, applied after rendering


def _stroke_dictionary(rng: RngStream, x_dim: int) -> Tensor:
    """Binary stroke masks; random-walk blobs on the 28x28 grid, plain
    sparse masks for other dims."""
    if x_dim != 784:
        return (rng.uniform01((_STROKES, x_dim)) < 0.15).astype(np.float64)
    side = 28
    strokes = np.zeros((_STROKES, side, side))
    for i in range(_STROKES):
        r = int(rng.uniform01(()) * (side - 4)) + 2
        c = int(rng.uniform01(()) * (side - 4)) + 2
        steps = (rng.uniform01((40, 2)) * 3).astype(int) - 1
        for dr, dc in steps:
            r = min(max(r + dr, 1), side - 2)
            c = min(max(c + dc, 1), side - 2)
            strokes[i, r - 1 : r + 1, c - 1 : c + 1] = 1.0
    return strokes.reshape(_STROKES, x_dim)


def synthetic_images(count: int, x_dim: int, seed: int) -> Tensor:
    """Structured grayscale images in [0, 1] with a binary hierarchy.

    Each image is a union of strokes from a fixed dictionary: a latent class
    picks its usual stroke subset (with a few strays), and a sparse flip mask
    adds pixel noise.  Stroke co-occurrence by class is exactly the kind of
    regularity a latent-over-binary-code hierarchy can exploit and a
    factorized code prior cannot; the flip noise keeps the support from
    collapsing to a lookup table.  Fully deterministic in the seed.
    """
    rng = RngStream(seed=seed)
    strokes = _stroke_dictionary(rng, x_dim)
    incidence = np.zeros((_CLASSES, _STROKES))
    for c in range(_CLASSES):
        order = np.argsort(rng.uniform01((_STROKES,)))
        incidence[c, order[:_STROKES_PER_CLASS]] = 1.0
    which = (rng.uniform01((count,)) * _CLASSES).astype(int)
    p_incl = np.where(incidence[which] == 1.0, _P_CLASS_STROKE, _P_OFF_STROKE)
    include = (rng.uniform01((count, _STROKES)) < p_incl).astype(np.float64)
    covered = (include @ strokes) > 0.0
    flips = rng.uniform01((count, x_dim)) < _FLIP_RATE
    gray = np.where(covered ^ flips, 0.97, 0.03)
    return gray


# ---------------------------------------------------------------------------
# loading pipelines
# ---------------------------------------------------------------------------

MNIST_TRAIN_IMAGES = "train-images-idx3-ubyte"
MNIST_TEST_IMAGES = "t10k-images-idx3-ubyte"


def load_mnist_splits(mnist_dir: str, binarization: Binarization) -> dict[str, Dataset]:
    """Parse the two official image files, binarize, and partition."""
    paths = {
        "train": os.path.join(mnist_dir, MNIST_TRAIN_IMAGES),
        "test": os.path.join(mnist_dir, MNIST_TEST_IMAGES),
    }
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise DataFilesMissing(
            "missing MNIST IDX files: "
            + ", ".join(missing)
            + f" (expected {MNIST_TRAIN_IMAGES} and {MNIST_TEST_IMAGES} in {mnist_dir})"
        )
    with open(paths["train"], "rb") as f:
        raw_train = parse_idx(f.read())
    with open(paths["test"], "rb") as f:
        raw_test = parse_idx(f.read())
    raw_train = raw_train.reshape(raw_train.shape[0], -1)
    raw_test = raw_test.reshape(raw_test.shape[0], -1)
    train_gray, valid_gray = partition(raw_train)
    return {
        "train": Dataset(binarize_static(train_gray, binarization), "train", binarization),
        "valid": Dataset(binarize_static(valid_gray, binarization), "valid", binarization),
        "test": Dataset(binarize_static(raw_test, binarization), "test", binarization),
    }


def load_synthetic_splits(
    x_dim: int, seed: int, binarization: Binarization
) -> dict[str, Dataset]:
    """Synthetic corpus shaped like the MNIST pipeline: 60000 raw + 10000 test."""
    gray = synthetic_images(70000, x_dim, seed)
    train_gray, valid_gray = partition(gray[:60000])
    test_gray = gray[60000:]
    return {
        "train": Dataset(binarize_static(train_gray, binarization), "train", binarization),
        "valid": Dataset(binarize_static(valid_gray, binarization), "valid", binarization),
        "test": Dataset(binarize_static(test_gray, binarization), "test", binarization),
    }


# ---------------------------------------------------------------------------
# preprocessed cache (same container framing as checkpoints)
# ---------------------------------------------------------------------------


def save_dataset_cache(dataset: Dataset, path) -> None:
    mode_tag = BINARIZE_MODES.index(dataset.binarization.mode)
    write_container(
        path,
        b"DATA",
        [
            (f"images::{dataset.split}", mode_tag, dataset.images),
            ("binarize_seed", dataset.binarization.seed, np.zeros(1)),
        ],
    )


def load_dataset_cache(path) -> Dataset:
    blocks = {name: (meta, arr) for name, meta, arr in read_container(path, b"DATA")}
    image_key = next(k for k in blocks if k.startswith("images::"))
    mode_tag, images = blocks[image_key]
    seed = blocks["binarize_seed"][0]
    return Dataset(
        images,
        image_key.split("::", 1)[1],
        Binarization(BINARIZE_MODES[mode_tag], int(seed)),
    )
