"""Datasets, non-IID client partitions and mini-batch iteration."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import CapacityError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise InputError("features must be a non-empty 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise InputError("labels must have one entry per feature row")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise InputError("features must be finite")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


def generate_synthetic(
    seed: int,
    n: int,
    d: int,
    num_classes: int,
    spread: float = 0.15,
) -> Dataset:
    """Balanced Gaussian blobs around fixed random centroids, clipped to [0, 1]."""
    if n <= 0 or d <= 0 or num_classes < 2:
        raise InputError("need n > 0, d > 0 and at least two classes")
    if n % num_classes:
        raise InputError(f"n={n} is not divisible by num_classes={num_classes}")
    rng = np.random.default_rng(seed)
    centroids = rng.uniform(0.2, 0.8, size=(num_classes, d))
    labels = np.repeat(np.arange(num_classes), n // num_classes)
    labels = labels[rng.permutation(n)]
    features = centroids[labels] + rng.normal(0.0, spread, size=(n, d))
    np.clip(features, 0.0, 1.0, out=features)
    return Dataset(features, labels.astype(np.int64), num_classes)


def _read_header(path: Path, raw: bytes, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(raw) < need:
        raise FormatError(path, len(raw), f"header truncated, need {need} bytes")
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise FormatError(path, 0, f"bad magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndims}I", raw, 4)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an MNIST-style IDX image/label pair; pixels scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_raw = images_path.read_bytes()
    lbl_raw = labels_path.read_bytes()
    count, rows, cols = _read_header(images_path, img_raw, IDX_IMAGES_MAGIC, 3)
    (n_labels,) = _read_header(labels_path, lbl_raw, IDX_LABELS_MAGIC, 1)
    body = 16 + count * rows * cols
    if len(img_raw) != body:
        raise FormatError(images_path, min(len(img_raw), body), f"expected {body} bytes, file has {len(img_raw)}")
    if len(lbl_raw) != 8 + n_labels:
        raise FormatError(labels_path, min(len(lbl_raw), 8 + n_labels), f"expected {8 + n_labels} bytes, file has {len(lbl_raw)}")
    if n_labels != count:
        raise FormatError(labels_path, 4, f"{n_labels} labels but {images_path.name} holds {count} images")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16).reshape(count, rows * cols)
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(labels_path, 8 + bad, f"label {labels[bad]} >= {num_classes}")
    return Dataset(pixels.astype(np.float64) / 255.0, labels, num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


@dataclass(frozen=True)
class PartitionPlan:
    client_indices: tuple[np.ndarray, ...]
    client_labels: tuple[tuple[int, ...], ...]
    labels_per_client: int
    samples_per_label: int

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def all_indices(self) -> np.ndarray:
        return np.concatenate(self.client_indices)


def required_per_class(num_clients: int, labels_per_client: int, samples_per_label: int, num_classes: int) -> int:
    """Largest per-class demand under the round-robin label assignment."""
    slots = num_clients * labels_per_client
    return -(-slots // num_classes) * samples_per_label


def partition_noniid(
    ds: Dataset,
    num_clients: int,
    labels_per_client: int = 2,
    samples_per_label: int = 400,
    seed: int = 0,
) -> PartitionPlan:
    """Give each client ``labels_per_client`` distinct labels, ``samples_per_label`` each.

    Label slots are dealt round-robin over the classes, the resulting label
    groups are shuffled across clients, and samples within a class are drawn
    without replacement in a seeded random order. Leftover samples are unused.
    """
    C = ds.num_classes
    if num_clients < 1:
        raise InputError("num_clients must be >= 1")
    if not 1 <= labels_per_client <= C:
        raise InputError(f"labels_per_client must be in [1, {C}]")
    if samples_per_label < 1:
        raise InputError("samples_per_label must be >= 1")
    rng = np.random.default_rng(seed)
    groups = [
        tuple((k * labels_per_client + j) % C for j in range(labels_per_client))
        for k in range(num_clients)
    ]
    order = rng.permutation(num_clients)
    groups = [groups[i] for i in order]

    demand = np.zeros(C, dtype=np.int64)
    for g in groups:
        for c in g:
            demand[c] += samples_per_label
    pools = []
    for c in range(C):
        pool = np.flatnonzero(ds.labels == c)
        if pool.size < demand[c]:
            raise CapacityError(f"label {c} has {pool.size} samples, partition needs {demand[c]}")
        pools.append(rng.permutation(pool))

    taken = np.zeros(C, dtype=np.int64)
    indices = []
    for g in groups:
        parts = []
        for c in g:
            parts.append(pools[c][taken[c] : taken[c] + samples_per_label])
            taken[c] += samples_per_label
        indices.append(np.sort(np.concatenate(parts)))
    return PartitionPlan(tuple(indices), tuple(groups), labels_per_client, samples_per_label)


def batches(
    ds: Dataset,
    plan: PartitionPlan,
    client_id: int,
    batch_size: int = 32,
    seed: int = 0,
    epoch: int = 0,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches of one client's samples; the short tail batch is kept."""
    if not 0 <= client_id < plan.num_clients:
        raise InputError(f"client {client_id} not in plan of {plan.num_clients}")
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    idx = plan.client_indices[client_id]
    rng = np.random.default_rng([seed, client_id, epoch])
    idx = idx[rng.permutation(idx.size)]
    for start in range(0, idx.size, batch_size):
        chunk = idx[start : start + batch_size]
        yield ds.features[chunk], ds.labels[chunk]


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)
