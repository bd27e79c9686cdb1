"""Dataset ingestion, normalization, seeded batching, and label utilities."""

import gzip
import logging
import struct
from dataclasses import dataclass

import numpy as np

from src.config import (
    CIFAR_IMAGE_SHAPE,
    CIFAR_RECORD_BYTES,
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    SEED_STREAM_DATA,
    SEED_STREAM_SHUFFLE,
    SEED_STREAM_SUBSAMPLE,
)
from src.errors import FormatError, UsageError
from src.numkit import derive_rng

logger = logging.getLogger(__name__)

SPLITS = {"train": 0, "test": 1}


@dataclass
class Dataset:
    """Images (N, C_in, H, W) scaled to [0, 1] (or normalized) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise FormatError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) == 0 or len(self.images) != len(self.labels):
            raise FormatError(
                f"{len(self.images)} images and {len(self.labels)} labels; need a matching N > 0"
            )
        if self.split not in SPLITS:
            raise FormatError(f"unknown split {self.split!r}")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def take(self, indices):
        """Dataset restricted to ``indices`` (in the given order)."""
        return Dataset(self.images[indices], self.labels[indices], self.split, self.num_classes)


@dataclass
class BatchPlan:
    """Seed, batch size and epoch that fix one epoch's batch order."""

    seed: int
    batch_size: int
    epoch: int = 0


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _write_bytes(path, payload):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(payload)


def _parse_idx(payload, magic, ndim, path):
    header = 4 + 4 * ndim
    if len(payload) < header:
        raise FormatError(f"{path}: shorter than an IDX header")
    (found,) = struct.unpack_from(">I", payload, 0)
    if found != magic:
        raise FormatError(f"{path}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", payload, 4)
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(payload) != expected or 0 in dims:
        raise FormatError(f"{path}: dims {dims} need {expected} bytes, file has {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split="train", num_classes=0):
    """Reads an IDX image file (magic 0x803) and label file (magic 0x801).

    Files ending in ``.gz`` are decompressed on the fly. Pixels are scaled to [0, 1].
    """
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if len(pixels) != len(labels):
        raise FormatError(f"{len(pixels)} images in {images_path} but {len(labels)} labels")
    logger.info("loaded %d images of %dx%d from %s", *pixels.shape, images_path)
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), split, num_classes)


def write_idx(images_path, labels_path, dataset):
    """Writes a single-channel dataset back to IDX files (pixels rounded to bytes)."""
    if dataset.images.shape[1] != 1:
        raise UsageError("IDX image files hold single-channel images")
    n, _, rows, cols = dataset.images.shape
    pixels = np.clip(np.rint(dataset.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols)
    _write_bytes(images_path, header + pixels.tobytes())
    labels = dataset.labels.astype(np.uint8)
    _write_bytes(labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())


def load_cifar_binary(path, split="train", num_classes=10):
    """Reads CIFAR-10 binary records (1 label byte + 3072 channel-major pixel bytes).

    ``path`` may be a single file or a list of batch files, concatenated in order.
    """
    paths = [path] if isinstance(path, (str, bytes)) or hasattr(path, "__fspath__") else path
    chunks = []
    for p in paths:
        payload = _read_bytes(p)
        if len(payload) == 0 or len(payload) % CIFAR_RECORD_BYTES:
            raise FormatError(
                f"{p}: {len(payload)} bytes is not a whole number of "
                f"{CIFAR_RECORD_BYTES}-byte records"
            )
        chunks.append(np.frombuffer(payload, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES))
    records = np.concatenate(chunks)
    images = records[:, 1:].reshape((-1,) + CIFAR_IMAGE_SHAPE).astype(np.float64) / 255.0
    logger.info("loaded %d CIFAR records from %d file(s)", len(records), len(chunks))
    return Dataset(images, records[:, 0].astype(np.int64), split, num_classes)


def write_cifar_binary(path, dataset):
    """Writes a (N, 3, 32, 32) dataset as CIFAR-10 binary records."""
    if dataset.input_shape != CIFAR_IMAGE_SHAPE:
        raise UsageError(f"CIFAR records hold {CIFAR_IMAGE_SHAPE} images")
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    records = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], pixels.reshape(len(dataset), -1)], axis=1
    )
    _write_bytes(path, records.tobytes())


def synthetic_dataset(
    num_samples, num_classes, image_shape=(1, 8, 8), seed=0, split="train", noise=0.35
):
    """Class-prototype images plus Gaussian noise, clipped to [0, 1].

    Prototypes depend only on ``seed``, so train and test splits share them; samples
    and the balanced label order depend on the split as well.
    """
    shape = tuple(image_shape)
    prototypes = derive_rng(seed, SEED_STREAM_DATA).uniform(0.0, 1.0, (num_classes,) + shape)
    rng = derive_rng(seed, SEED_STREAM_DATA, SPLITS[split] + 1)
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    images = prototypes[labels] + noise * rng.standard_normal((num_samples,) + shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels, split, num_classes)


def subsample(dataset, n, seed):
    """Seeded subset of ``n`` samples (kept in original order); ``None`` keeps all."""
    if n is None or n >= len(dataset):
        return dataset
    rng = derive_rng(seed, SEED_STREAM_SUBSAMPLE, SPLITS[dataset.split])
    return dataset.take(np.sort(rng.choice(len(dataset), size=n, replace=False)))


def channel_stats(dataset):
    """Per-channel mean and standard deviation (zero deviations replaced by one)."""
    mean = dataset.images.mean(axis=(0, 2, 3))
    std = dataset.images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(dataset, mean, std):
    """``(x - mean) / std`` per channel."""
    mean = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    std = np.asarray(std, dtype=np.float64)[None, :, None, None]
    images = (dataset.images - mean) / std
    return Dataset(images, dataset.labels, dataset.split, dataset.num_classes)


def smooth_labels(t, num_classes, epsilon):
    """Label-smoothed target rows: ``1 - eps + eps/C`` on the target, ``eps/C`` elsewhere."""
    if not 0.0 <= epsilon < 1.0:
        raise UsageError(f"label smoothing epsilon must lie in [0, 1), got {epsilon}")
    targets = np.atleast_1d(np.asarray(t, dtype=np.int64))
    off = epsilon / num_classes
    out = np.full((len(targets), num_classes), off)
    out[np.arange(len(targets)), targets] = 1.0 - off * (num_classes - 1)
    return out[0] if np.ndim(t) == 0 else out


def batch_indices(num_samples, plan):
    """Index arrays of one epoch: a seeded permutation cut into batches, last one partial."""
    if not 1 <= plan.batch_size <= num_samples:
        raise UsageError(f"batch size {plan.batch_size} must lie in [1, {num_samples}]")
    order = derive_rng(plan.seed, SEED_STREAM_SHUFFLE, plan.epoch).permutation(num_samples)
    return [order[i : i + plan.batch_size] for i in range(0, num_samples, plan.batch_size)]


def batches(dataset, plan):
    """Yields ``(images, labels)`` batches for ``plan.epoch``."""
    for idx in batch_indices(len(dataset), plan):
        yield dataset.images[idx], dataset.labels[idx]
