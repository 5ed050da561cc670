"""Datasets, Dirichlet partitioning, label-flip transforms and the server's
one-sample-per-class auxiliary set."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if X.ndim != 2:
            X = X.reshape(len(y), -1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("features and labels differ in length")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("label out of range")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


# A client's local data is just a Dataset.
ClientDataset = Dataset


@dataclass(frozen=True)
class AuxiliaryDataset:
    """At most one feature vector per class, keyed by class id."""

    entries: dict[int, np.ndarray]
    num_classes: int

    def __post_init__(self):
        if not self.entries:
            raise ValueError("auxiliary dataset is empty")
        for c in self.entries:
            if not 0 <= c < self.num_classes:
                raise ValueError("auxiliary class out of range")

    @property
    def classes(self) -> list[int]:
        return sorted(self.entries)

    @property
    def coverage(self) -> float:
        return len(self.entries) / self.num_classes

    def matrix(self) -> np.ndarray:
        """Features stacked in ascending class order."""
        return np.stack([self.entries[c] for c in self.classes])


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int
    beta: float
    min_samples_per_client: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.min_samples_per_client < 0:
            raise ValueError("min_samples_per_client must be >= 0")


def make_blobs(
    num_classes: int,
    dim: int,
    n_per_class: int,
    radius: float,
    noise_sigma: float,
    rng: np.random.Generator,
    train_fraction: float = 0.8,
) -> tuple[Dataset, Dataset]:
    """Gaussian blobs around class means placed uniformly on a sphere.

    The split is stratified: each class contributes ``round(0.8 * n)``
    training samples and the rest go to test.
    """
    if min(num_classes, dim, n_per_class) < 1:
        raise ValueError("counts must be >= 1")
    if radius <= 0 or noise_sigma < 0:
        raise ValueError("radius must be > 0 and noise_sigma >= 0")
    means = rng.standard_normal((num_classes, dim))
    means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
    n_train = int(round(train_fraction * n_per_class))
    tr_X, tr_y, te_X, te_y = [], [], [], []
    for c in range(num_classes):
        pts = means[c] + noise_sigma * rng.standard_normal((n_per_class, dim))
        tr_X.append(pts[:n_train])
        te_X.append(pts[n_train:])
        tr_y.append(np.full(n_train, c))
        te_y.append(np.full(n_per_class - n_train, c))
    train = Dataset(np.concatenate(tr_X), np.concatenate(tr_y), num_classes)
    test = Dataset(np.concatenate(te_X), np.concatenate(te_y), num_classes)
    return train, test


def load_csv(path, num_classes: int, dim: int) -> Dataset:
    """Read ``dim`` float columns followed by an integer label per row (no header)."""
    X, y = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != dim + 1:
                raise ValueError(f"row {row_no}: expected {dim + 1} columns, got {len(row)}")
            try:
                feats = [float(v) for v in row[:dim]]
                label = int(row[dim])
            except ValueError as exc:
                raise ValueError(f"row {row_no}: {exc}") from None
            if not all(math.isfinite(v) for v in feats):
                raise ValueError(f"row {row_no}: non-finite feature")
            if not 0 <= label < num_classes:
                raise ValueError(f"row {row_no}: label {label} outside [0, {num_classes})")
            X.append(feats)
            y.append(label)
    if not y:
        raise ValueError("no samples")
    return Dataset(np.array(X), np.array(y), num_classes)


def dirichlet_partition(train: Dataset, cfg: PartitionConfig, rng: np.random.Generator) -> list[Dataset]:
    """Per class, split its samples across clients with Dir(beta) proportions.

    Clients that end up under ``min_samples_per_client`` are topped up with
    samples taken from the currently largest client, one at a time.
    """
    n = len(train)
    if n == 0:
        raise ValueError("cannot partition an empty dataset")
    N = cfg.num_clients
    if N * cfg.min_samples_per_client > n:
        raise ValueError("infeasible floor")
    buckets: list[list[int]] = [[] for _ in range(N)]
    for c in range(train.num_classes):
        idx = np.flatnonzero(train.y == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(N, cfg.beta))
        counts = rng.multinomial(idx.size, props)
        pos = 0
        for k in range(N):
            buckets[k].extend(idx[pos:pos + counts[k]].tolist())
            pos += counts[k]
    # donate from the largest client (lowest id on ties) until the floor holds
    while True:
        short = [k for k in range(N) if len(buckets[k]) < cfg.min_samples_per_client]
        if not short:
            break
        for k in short:
            donor = max(range(N), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    return [train.subset(sorted(b)) for b in buckets]


def build_auxiliary(train: Dataset, coverage: float, rng: np.random.Generator) -> tuple[AuxiliaryDataset, Dataset]:
    """Pick ceil(coverage * K) classes and one sample of each; drop them from train."""
    if not 0 < coverage <= 1:
        raise ValueError("coverage must lie in (0, 1]")
    K = train.num_classes
    n_cls = math.ceil(coverage * K - 1e-9)
    classes = sorted(rng.choice(K, size=n_cls, replace=False).tolist())
    entries = {}
    taken = []
    for c in classes:
        idx = np.flatnonzero(train.y == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has no samples")
        pick = int(rng.choice(idx))
        taken.append(pick)
        entries[c] = train.X[pick].copy()
    keep = np.setdiff1d(np.arange(len(train)), taken)
    return AuxiliaryDataset(entries, K), train.subset(keep)


def balanced_sample(train: Dataset, size: int, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Class-balanced draw of ``size`` samples without replacement; returns (sample, rest)."""
    K = train.num_classes
    per = [size // K + (1 if c < size % K else 0) for c in range(K)]
    taken = []
    for c in range(K):
        idx = np.flatnonzero(train.y == c)
        k = min(per[c], idx.size)
        if k:
            taken.extend(rng.choice(idx, size=k, replace=False).tolist())
    taken = np.sort(np.array(taken, dtype=np.int64))
    rest = np.setdiff1d(np.arange(len(train)), taken)
    return train.subset(taken), train.subset(rest)


def flip_labels_static(data: Dataset) -> Dataset:
    """Replace every label l with K - l - 1."""
    return Dataset(data.X, data.num_classes - 1 - data.y, data.num_classes)


def label_entropy(data: Dataset) -> float:
    """Shannon entropy (nats) of a dataset's label histogram."""
    counts = data.class_counts().astype(np.float64)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())
