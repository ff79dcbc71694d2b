"""Datasets: CIFAR binary batches and a synthetic Gaussian-cluster generator.

Pixels are mapped ``b -> b / 127.5 - 1`` into ``[-1, 1]``; :func:`to_image`
undoes this into ``[0, 1]`` for SSIM.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

IMAGE_SHAPE = (32, 32, 3)
PIXELS = 3072
CIFAR10_RECORD = 1 + PIXELS
CIFAR100_RECORD = 2 + PIXELS
SOURCES = ("cifar10", "cifar100-fine", "synthetic")


class MalformedFileError(ValueError):
    """File length is not a whole number of records."""


class CorruptRecordError(ValueError):
    """A record carries a label outside the class range."""


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    class_count: int
    source: str = "synthetic"

    def __post_init__(self):
        samples = np.asarray(self.samples)
        labels = np.asarray(self.labels, dtype=np.int64)
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise ValueError(f"samples must be a non-empty n x d matrix, got {samples.shape}")
        if labels.shape != (samples.shape[0],):
            raise ValueError(f"{samples.shape[0]} samples but labels have shape {labels.shape}")
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dims(self) -> int:
        return self.samples.shape[1]

    @property
    def is_image(self) -> bool:
        return self.dims == PIXELS

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian clusters around random unit directions.

    Class ``c`` is centred at ``cluster_separation * u_c / sqrt(d)`` with
    ``u_c`` a random unit vector, and each coordinate gets i.i.d. noise of
    standard deviation ``noise_scale / sqrt(d)``.  Sets with
    ``cluster_separation / noise_scale >= 2 * sqrt(d)`` have been separable by
    a bias-free linear model in every configuration we tested.
    """

    class_count: int
    per_class: int
    dims: int
    cluster_separation: float = 4.0
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if self.per_class < 1 or self.dims < 1:
            raise ValueError("per_class and dims must be positive")
        if not self.cluster_separation > 0:
            raise ValueError("cluster_separation must be > 0")
        if not self.noise_scale >= 0:
            raise ValueError("noise_scale must be >= 0")


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    d = spec.dims
    dirs = rng.standard_normal((spec.class_count, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centres = spec.cluster_separation * dirs / np.sqrt(d)
    labels = np.repeat(np.arange(spec.class_count), spec.per_class)
    noise = rng.standard_normal((labels.size, d)) * (spec.noise_scale / np.sqrt(d))
    samples = np.clip(centres[labels] + noise, -1.0, 1.0)
    return Dataset(samples, labels, spec.class_count, "synthetic")


def normalize_bytes(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 127.5 - 1.0


def denormalize_to_bytes(samples: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_bytes`, rounding to the nearest byte."""
    return np.clip(np.rint((np.asarray(samples) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _read_records(path, record_size: int) -> np.ndarray:
    size = os.path.getsize(path)
    if size == 0 or size % record_size:
        raise MalformedFileError(
            f"{path}: {size} bytes is not a positive multiple of the {record_size}-byte record"
        )
    raw = np.fromfile(path, dtype=np.uint8)
    return raw.reshape(-1, record_size)


def _first_k_per_class(labels: np.ndarray, k: int | None, n_classes: int) -> np.ndarray:
    if k is None:
        return np.arange(labels.size)
    if k < 0:
        raise ValueError("limit_per_class must be non-negative")
    keep = np.zeros(labels.size, dtype=bool)
    for c in range(n_classes):
        keep[np.flatnonzero(labels == c)[:k]] = True
    return np.flatnonzero(keep)


def _load(path, record_size, label_col, n_classes, limit_per_class, source) -> Dataset:
    records = _read_records(path, record_size)
    labels = records[:, label_col].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise CorruptRecordError(
            f"{path}: record {bad[0]} has label {labels[bad[0]]} (expected < {n_classes})"
        )
    idx = _first_k_per_class(labels, limit_per_class, n_classes)
    pixels = records[idx, record_size - PIXELS:]
    return Dataset(normalize_bytes(pixels), labels[idx], n_classes, source)


def load_cifar10(path, limit_per_class: int | None = None) -> Dataset:
    """Read a CIFAR-10 binary batch (1 label byte + 3072 pixel bytes per record).

    With ``limit_per_class`` only the first ``k`` records of each class, in
    file order, are kept.
    """
    return _load(path, CIFAR10_RECORD, 0, 10, limit_per_class, "cifar10")


def load_cifar100(path, limit_per_class: int | None = None) -> Dataset:
    """Read a CIFAR-100 binary file using the fine (100-class) labels."""
    return _load(path, CIFAR100_RECORD, 1, 100, limit_per_class, "cifar100-fine")


def serialize_cifar10(dataset: Dataset) -> bytes:
    """Encode a dataset back into CIFAR-10 binary records."""
    if dataset.dims != PIXELS or dataset.class_count > 10:
        raise ValueError("only 3072-dim datasets with <= 10 classes fit the CIFAR-10 layout")
    out = np.empty((dataset.n, CIFAR10_RECORD), dtype=np.uint8)
    out[:, 0] = dataset.labels
    out[:, 1:] = denormalize_to_bytes(dataset.samples)
    return out.tobytes()


def serialize_cifar100(dataset: Dataset, coarse_labels=None) -> bytes:
    if dataset.dims != PIXELS or dataset.class_count > 100:
        raise ValueError("only 3072-dim datasets with <= 100 classes fit the CIFAR-100 layout")
    out = np.empty((dataset.n, CIFAR100_RECORD), dtype=np.uint8)
    out[:, 0] = 0 if coarse_labels is None else np.asarray(coarse_labels, dtype=np.uint8)
    out[:, 1] = dataset.labels
    out[:, 2:] = denormalize_to_bytes(dataset.samples)
    return out.tobytes()


def to_image(sample) -> np.ndarray:
    """Map a normalized 3072-vector to a ``32 x 32 x 3`` image in ``[0, 1]``.

    CIFAR stores the red, green and blue 32x32 planes one after another.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape[-1] != PIXELS:
        raise ValueError(f"expected {PIXELS} values per sample, got {sample.shape[-1]}")
    planes = sample.reshape(sample.shape[:-1] + (3, 32, 32))
    return np.moveaxis((planes + 1.0) / 2.0, -3, -1)


def from_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-3:] != IMAGE_SHAPE:
        raise ValueError(f"expected images of shape {IMAGE_SHAPE}, got {image.shape}")
    planes = np.moveaxis(image, -1, -3)
    return (planes * 2.0 - 1.0).reshape(image.shape[:-3] + (PIXELS,))
