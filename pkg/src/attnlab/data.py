"""CIFAR-10 binary ingestion, normalization, augmentation, and a synthetic
stand-in generator.

The on-disk format is the standard one: each record is 1 label byte followed
by 3072 pixel bytes (red plane, then green, then blue, row-major 32x32).
Training data lives in ``data_batch_*.bin``; test data in ``test_batch.bin``.

Images load as float64 in [0, 1] and are normalized per channel to zero mean
and unit standard deviation, with the statistics always computed from the
training split.

``write_synthetic_cifar10`` emits files in the exact same binary format with
a strong per-class color signature, so the full pipeline (including training
smoke runs) works on machines that do not have the real corpus.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
TRAIN_GLOB = "data_batch_*.bin"
TEST_FILE = "test_batch.bin"
PAD = 2


class DataFormatError(ValueError):
    """File length is not consistent with the 3073-byte record format."""


class DataCorruptionError(ValueError):
    """A record decodes to an impossible value (label byte >= 10)."""


@dataclass
class Dataset:
    images: np.ndarray  # [M, 3, 32, 32] float64, normalized
    labels: np.ndarray  # [M] int64 in [0, 10)
    split: str

    def __len__(self) -> int:
        return len(self.labels)


def _split_files(directory: Path, split: str) -> list[Path]:
    if split == "train":
        files = sorted(directory.glob(TRAIN_GLOB))
        if not files:
            raise FileNotFoundError(
                f"no {TRAIN_GLOB} files in {directory}; expected the binary batch files"
            )
        return files
    if split == "test":
        path = directory / TEST_FILE
        if not path.exists():
            raise FileNotFoundError(f"missing {path}")
        return [path]
    raise ad.ConfigError(f"unknown split {split!r}; expected 'train' or 'test'")


def _read_raw(directory: Path, split: str) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for path in _split_files(directory, split):
        blob = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if blob.size == 0 or blob.size % RECORD_BYTES != 0:
            raise DataFormatError(
                f"{path}: {blob.size} bytes is not a multiple of the {RECORD_BYTES}-byte record"
            )
        records = blob.reshape(-1, RECORD_BYTES)
        batch_labels = records[:, 0]
        if (batch_labels >= NUM_CLASSES).any():
            bad = int(np.argmax(batch_labels >= NUM_CLASSES))
            raise DataCorruptionError(
                f"{path}: record {bad} has label byte {batch_labels[bad]} >= {NUM_CLASSES}"
            )
        images.append(records[:, 1:].reshape(-1, *IMAGE_SHAPE))
        labels.append(batch_labels.astype(np.int64))
    return np.concatenate(images), np.concatenate(labels)


def channel_stats(directory: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of the training split, on the [0, 1] scale."""
    raw, _ = _read_raw(Path(directory), "train")
    scaled = raw / 255.0
    mean = scaled.mean(axis=(0, 2, 3))
    std = scaled.std(axis=(0, 2, 3))
    if (std == 0).any():
        raise DataCorruptionError(f"{directory}: a channel of the training split is constant")
    return mean, std


def _balanced_subset(labels: np.ndarray, subset_size: int, seed: int) -> np.ndarray:
    if subset_size <= 0 or subset_size % NUM_CLASSES != 0:
        raise ad.ConfigError(
            f"subset_size must be a positive multiple of {NUM_CLASSES}, got {subset_size}"
        )
    per_class = subset_size // NUM_CLASSES
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(NUM_CLASSES):
        pool = np.flatnonzero(labels == c)
        if len(pool) < per_class:
            raise ad.ConfigError(
                f"subset_size {subset_size} needs {per_class} samples of class {c}, "
                f"only {len(pool)} available"
            )
        picks.append(rng.choice(pool, size=per_class, replace=False))
    order = np.concatenate(picks)
    return order[rng.permutation(len(order))]


def load_cifar10(
    directory: str | Path,
    split: str,
    subset_size: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Load a split, normalized with training-split statistics.

    ``subset_size`` takes a seeded class-balanced sample (equal counts per
    class; must be a multiple of 10).
    """
    directory = Path(directory)
    raw, labels = _read_raw(directory, split)
    mean, std = channel_stats(directory)
    images = (raw / 255.0 - mean[:, None, None]) / std[:, None, None]
    if subset_size is not None:
        keep = _balanced_subset(labels, subset_size, seed)
        images, labels = images[keep], labels[keep]
    return Dataset(images=images, labels=labels, split=split)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad to 36x36, random 32x32 crop, then horizontal flip with p=0.5."""
    if image.shape != IMAGE_SHAPE:
        raise ad.ShapeError(f"augment expects {IMAGE_SHAPE}, got {image.shape}")
    r, c = rng.integers(0, 2 * PAD + 1, size=2)
    flip = rng.random() < 0.5
    padded = np.zeros((3, 32 + 2 * PAD, 32 + 2 * PAD))
    padded[:, PAD : PAD + 32, PAD : PAD + 32] = image
    out = padded[:, r : r + 32, c : c + 32]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply ``augment`` to each image in order (order fixes the rng stream)."""
    return np.stack([augment(img, rng) for img in images])


# ---------------------------------------------------------------------------
# synthetic stand-in corpus
# ---------------------------------------------------------------------------

# Ten well-separated RGB signatures; classification reduces to recovering the
# dominant color through noise, which a small conv net learns in a few epochs.
_PALETTE = np.array(
    [
        [200, 40, 40],
        [40, 200, 40],
        [40, 40, 200],
        [200, 200, 40],
        [200, 40, 200],
        [40, 200, 200],
        [230, 130, 30],
        [30, 130, 230],
        [130, 230, 30],
        [120, 120, 120],
    ],
    dtype=np.float64,
)


def _synthetic_records(n: int, rng: np.random.Generator) -> bytes:
    labels = rng.integers(0, NUM_CLASSES, size=n)
    base = _PALETTE[labels][:, :, None, None]  # [n, 3, 1, 1]
    noise = rng.normal(0.0, 40.0, size=(n, *IMAGE_SHAPE))
    brightness = rng.uniform(-20.0, 20.0, size=(n, 1, 1, 1))
    images = np.clip(base + noise + brightness, 0, 255).astype(np.uint8)
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(n, -1)
    return records.tobytes()


def write_synthetic_cifar10(
    directory: str | Path,
    *,
    train_records: int = 10000,
    test_records: int = 2000,
    seed: int = 0,
) -> Path:
    """Write a synthetic corpus in the exact binary batch format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    (directory / "data_batch_1.bin").write_bytes(_synthetic_records(train_records, rng))
    (directory / TEST_FILE).write_bytes(_synthetic_records(test_records, rng))
    return directory
