"""MNIST IDX and CIFAR-10 binary readers, synthetic data and seeded batching."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "DatasetError",
    "load_mnist_idx",
    "load_cifar10_bin",
    "synthetic_dataset",
    "batches",
]

CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetError(ValueError):
    """A dataset file is malformed; the message names the file and offset."""


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float32
    labels: np.ndarray  # (n,) int64
    class_count: int
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images must be (n, c, h, w) with one label per image")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.class_count,
                       self.channel_mean, self.channel_std)


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _idx_header(raw: bytes, path, magic: int, ndim: int):
    if len(raw) < 4 + 4 * ndim:
        raise DatasetError(f"{path}: truncated header ({len(raw)} bytes)")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise DatasetError(f"{path}: bad magic {got} at offset 0, expected {magic}")
    dims = [int.from_bytes(raw[4 + 4 * d:8 + 4 * d], "big") for d in range(ndim)]
    need = 4 + 4 * ndim + int(np.prod(dims))
    if len(raw) < need:
        raise DatasetError(f"{path}: truncated, {len(raw)} bytes but header implies {need}")
    return dims, 4 + 4 * ndim


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    raw = _read(images_path)
    (n, h, w), off = _idx_header(raw, images_path, 2051, 3)
    images = np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=off)
    raw = _read(labels_path)
    (m,), off = _idx_header(raw, labels_path, 2049, 1)
    labels = np.frombuffer(raw, dtype=np.uint8, count=m, offset=off).astype(np.int64)
    if m != n:
        raise DatasetError(f"{labels_path}: {m} labels for {n} images in {images_path}")
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError(f"{labels_path}: label {labels[bad]} at offset {off + bad}")
    x = (images.reshape(n, 1, h, w).astype(np.float32) / np.float32(255.0))
    return Dataset(x, labels, 10)


def load_mnist_dir(directory, split: str = "train") -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    return load_mnist_idx(os.path.join(directory, f"{prefix}-images-idx3-ubyte"),
                          os.path.join(directory, f"{prefix}-labels-idx1-ubyte"))


def load_cifar10_bin(batch_paths, stats=None) -> Dataset:
    """Read CIFAR-10 binary batches and normalize each channel.

    Records are 1 label byte followed by 3072 channel-planar RGB bytes.
    ``stats`` = (mean, std) per channel; when omitted they are computed from
    these files, which should then be the training batches.
    """
    if isinstance(batch_paths, (str, os.PathLike)):
        batch_paths = [batch_paths]
    chunks = []
    for path in batch_paths:
        raw = _read(path)
        if len(raw) % CIFAR_RECORD:
            raise DatasetError(
                f"{path}: length {len(raw)} is not a multiple of the {CIFAR_RECORD}-byte record"
            )
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(recs[:, 0] > 9)
        if bad.size:
            raise DatasetError(
                f"{path}: label byte {recs[bad[0], 0]} at offset {bad[0] * CIFAR_RECORD}"
            )
        chunks.append(recs)
    recs = np.concatenate(chunks) if len(chunks) > 1 else chunks[0]
    labels = recs[:, 0].astype(np.int64)
    x = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    if stats is None:
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        std = x.std(axis=(0, 2, 3), dtype=np.float64)
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    x = ((x - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)).astype(np.float32)
    return Dataset(x, labels, 10, mean.astype(np.float32), std.astype(np.float32))


def load_cifar_dir(directory, split: str = "train", stats=None) -> Dataset:
    if split == "train":
        paths = [os.path.join(directory, f"data_batch_{i}.bin") for i in range(1, 6)]
    else:
        paths = [os.path.join(directory, "test_batch.bin")]
    return load_cifar10_bin(paths, stats)


def synthetic_dataset(n: int, c: int, h: int, w: int, class_count: int, seed: int = 0,
                      separation: float = 3.0, noise: float = 1.0) -> Dataset:
    """Gaussian blobs around per-class mean images; labels cycle so classes are balanced."""
    if min(n, c, h, w, class_count) < 1:
        raise ValueError("all sizes must be >= 1")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((class_count, c, h, w)) * separation
    labels = rng.permutation(np.arange(n) % class_count)
    x = means[labels] + noise * rng.standard_normal((n, c, h, w))
    return Dataset(x.astype(np.float32), labels.astype(np.int64), class_count)


def batches(dataset: Dataset | int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation for (seed, epoch) cut into batches; the last may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = dataset if isinstance(dataset, int) else dataset.n
    perm = np.random.default_rng([seed, epoch, 0]).permutation(n)
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]
