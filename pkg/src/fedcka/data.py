"""Datasets, non-IID client partitioning and mini-batching."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, IngestionError

logger = logging.getLogger(__name__)

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR10_RECORDS_PER_FILE = 10000
DATA_DIR_ENV = "FEDCKA_DATA_DIR"


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W), float64 in [0, 1]
    labels: np.ndarray  # (N,), int64 in [0, num_classes)
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)


# -- CIFAR-10 binary ---------------------------------------------------------------


def _read_cifar_file(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise IngestionError(f"missing CIFAR-10 file: {path}")
    expected = CIFAR10_RECORD_BYTES * CIFAR10_RECORDS_PER_FILE
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != expected:
        full, rem = divmod(raw.size, CIFAR10_RECORD_BYTES)
        raise IngestionError(
            f"{path}: expected {expected} bytes, got {raw.size} "
            f"({full} whole records, {rem} stray bytes at byte offset {full * CIFAR10_RECORD_BYTES})"
        )
    records = raw.reshape(CIFAR10_RECORDS_PER_FILE, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise IngestionError(
            f"{path}: label byte {labels[bad]} > 9 at byte offset {bad * CIFAR10_RECORD_BYTES}"
        )
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels


def load_cifar10_binary(dir_path: Union[str, Path, None] = None) -> Tuple[Dataset, Dataset]:
    """Read the CIFAR-10 binary distribution (``data_batch_{1..5}.bin``, ``test_batch.bin``).

    Each record is one label byte followed by 3072 pixel bytes: the red,
    green and blue 32x32 planes in row-major order. Pixels are scaled to [0, 1].
    If ``dir_path`` is None the ``FEDCKA_DATA_DIR`` environment variable is used.
    """
    if dir_path is None:
        dir_path = os.environ.get(DATA_DIR_ENV)
        if not dir_path:
            raise IngestionError(f"no CIFAR-10 directory given and {DATA_DIR_ENV} is unset")
    root = Path(dir_path)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    parts = [_read_cifar_file(root / name) for name in CIFAR10_TRAIN_FILES]
    train_px = np.concatenate([p for p, _ in parts])
    train_y = np.concatenate([y for _, y in parts])
    test_px, test_y = _read_cifar_file(root / CIFAR10_TEST_FILE)
    scale = 1.0 / 255.0
    train = Dataset(train_px * scale, train_y, 10, "cifar10-train")
    test = Dataset(test_px * scale, test_y, 10, "cifar10-test")
    return train, test


def stratified_subset(labels: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Sorted indices of ``n`` samples with (near) equal counts per class."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    rng = np.random.default_rng(seed)
    per_class = np.full(len(classes), n // len(classes))
    per_class[: n % len(classes)] += 1
    picked = []
    for k, cnt in zip(classes, per_class):
        idx = np.flatnonzero(labels == k)
        if cnt > idx.size:
            raise ContractError(f"class {k} has only {idx.size} samples, {cnt} requested")
        picked.append(rng.choice(idx, size=cnt, replace=False))
    return np.sort(np.concatenate(picked))


# -- synthetic ---------------------------------------------------------------------


def synthetic_dataset(num_classes: int, n_per_class: int, dim: int = 32, seed: int = 0,
                      channels: int = 3, noise: float = 0.1) -> Dataset:
    """Gaussian class blobs laid out as (channels, dim, dim) images.

    Each class gets a random mean image in [0.2, 0.8]; samples add isotropic
    noise of scale ``noise`` and are clipped to [0, 1]. With the default
    noise the classes are separated by a wide margin.
    """
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    shape = (channels, dim, dim)
    means = rng.uniform(0.2, 0.8, size=(num_classes,) + shape)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = means[labels] + noise * rng.standard_normal((labels.size,) + shape)
    order = rng.permutation(labels.size)
    return Dataset(np.clip(images[order], 0.0, 1.0), labels[order], num_classes, "synthetic")


# -- partitioning --------------------------------------------------------------------


@dataclass
class Partition:
    assignments: List[np.ndarray]
    alpha: float
    seed: int
    num_classes: int
    class_counts: np.ndarray = field(repr=False)

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([a.size for a in self.assignments], dtype=np.int64)

    def validate(self, n_samples: int, min_size: int = 1) -> None:
        allidx = np.concatenate(self.assignments) if self.assignments else np.zeros(0, np.int64)
        if allidx.size != n_samples or np.unique(allidx).size != n_samples:
            raise ContractError("partition is not a disjoint cover of the sample indices")
        if allidx.size and (allidx.min() < 0 or allidx.max() >= n_samples):
            raise ContractError("partition holds out-of-range indices")
        if self.sizes().min(initial=n_samples) < min_size:
            raise ContractError(f"a client holds fewer than {min_size} samples")
        if not np.array_equal(self.class_counts.sum(axis=1), self.sizes()):
            raise ContractError("class_counts rows do not match client sizes")


def _class_counts(assignments: Sequence[np.ndarray], labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.stack([np.bincount(labels[a], minlength=num_classes) for a in assignments]).astype(np.int64)


def dirichlet_partition(labels: Sequence[int], n_clients: int, alpha: float, seed: int = 0,
                        min_size: int = 10, max_retries: int = 1000,
                        num_classes: Optional[int] = None) -> Partition:
    """Split sample indices across clients with per-class Dirichlet proportions.

    For every class a proportion vector p ~ Dir(alpha * 1) over clients is drawn
    and the (shuffled) class indices are cut at the cumulative proportions.
    The whole draw is repeated until every client holds ``min_size`` samples.
    """
    if n_clients < 2:
        raise ContractError(f"need at least 2 clients, got {n_clients}")
    if not alpha > 0:
        raise ContractError(f"alpha must be positive, got {alpha}")
    labels = np.asarray(labels, dtype=np.int64)
    K = int(num_classes if num_classes is not None else labels.max() + 1)
    if n_clients * min_size > labels.size:
        raise ContractError(f"{labels.size} samples cannot give {n_clients} clients {min_size} each")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(labels == k) for k in range(K)]

    for _ in range(max_retries):
        buckets: List[List[np.ndarray]] = [[] for _ in range(n_clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            p = rng.dirichlet(np.full(n_clients, float(alpha)))
            cuts = (np.cumsum(p)[:-1] * idx.size).astype(np.int64)
            for c, chunk in enumerate(np.split(idx, cuts)):
                buckets[c].append(chunk)
        assignments = [np.sort(np.concatenate(b)) for b in buckets]
        if min(a.size for a in assignments) >= min_size:
            part = Partition(assignments, float(alpha), seed, K, _class_counts(assignments, labels, K))
            return part
    raise ContractError(
        f"no partition with min_size={min_size} found in {max_retries} draws (alpha={alpha})"
    )


def iid_partition(n_samples: int, n_clients: int, seed: int, labels: Sequence[int],
                  num_classes: Optional[int] = None) -> Partition:
    """Uniformly random equal-size split."""
    labels = np.asarray(labels, dtype=np.int64)
    K = int(num_classes if num_classes is not None else labels.max() + 1)
    perm = np.random.default_rng(seed).permutation(n_samples)
    assignments = [np.sort(a) for a in np.array_split(perm, n_clients)]
    return Partition(assignments, float("inf"), seed, K, _class_counts(assignments, labels, K))


def partition_heatmap(partition: Partition) -> np.ndarray:
    """(clients, classes) matrix of per-client class counts."""
    return partition.class_counts.copy()


def write_heatmap_csv(partition: Partition, path: Union[str, Path], comment: Optional[str] = None) -> None:
    counts = partition_heatmap(partition)
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["client"] + [f"class_{k}" for k in range(counts.shape[1])])
        for i, row in enumerate(counts):
            w.writerow([i] + [int(v) for v in row])


def write_partition_csv(partition: Partition, path: Union[str, Path], comment: Optional[str] = None) -> None:
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["client_id", "sample_index"])
        for cid, idx in enumerate(partition.assignments):
            for s in idx:
                w.writerow([cid, int(s)])


def read_partition_csv(path: Union[str, Path], labels: Sequence[int], alpha: float = float("nan"),
                       seed: int = -1, num_classes: Optional[int] = None) -> Partition:
    labels = np.asarray(labels, dtype=np.int64)
    rows: dict = {}
    with open(path, newline="") as f:
        reader = csv.reader(line for line in f if not line.startswith("#"))
        header = next(reader, None)
        if header != ["client_id", "sample_index"]:
            raise IngestionError(f"{path}: unexpected partition header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                cid, s = int(row[0]), int(row[1])
            except (ValueError, IndexError) as exc:
                raise IngestionError(f"{path}: bad row {lineno}: {row}") from exc
            rows.setdefault(cid, []).append(s)
    n_clients = max(rows) + 1 if rows else 0
    assignments = [np.sort(np.asarray(rows.get(c, []), dtype=np.int64)) for c in range(n_clients)]
    K = int(num_classes if num_classes is not None else labels.max() + 1)
    return Partition(assignments, alpha, seed, K, _class_counts(assignments, labels, K))


# -- batching ------------------------------------------------------------------------


def batch_iterator(dataset: Dataset, indices: Sequence[int], batch_size: int,
                   epoch_seed) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield shuffled (images, labels) batches; the last batch may be short.

    ``epoch_seed`` is anything :func:`numpy.random.default_rng` accepts; pass
    e.g. ``(seed, round, epoch, client)`` to get a distinct order per epoch.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ContractError("cannot batch an empty index list")
    if isinstance(epoch_seed, tuple):
        epoch_seed = list(epoch_seed)
    order = np.random.default_rng(epoch_seed).permutation(indices)
    for start in range(0, order.size, batch_size):
        sel = order[start:start + batch_size]
        yield dataset.images[sel], dataset.labels[sel]
