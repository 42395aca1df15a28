"""Datasets, synthetic concept-shift generation and cluster-wise non-IID partitioners."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for malformed IDX input."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels length must equal the number of feature rows")
        if features.shape[0] < 1:
            raise ValueError("dataset must hold at least one sample")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class Partition:
    """Client shards (index lists into a parent dataset) plus ground-truth clusters."""

    client_shards: tuple
    cluster_of_client: tuple
    seed: int

    def __post_init__(self):
        shards = tuple(np.asarray(s, dtype=np.int64) for s in self.client_shards)
        truth = tuple(int(c) for c in self.cluster_of_client)
        if len(truth) != len(shards):
            raise ValueError("cluster_of_client length must equal the number of shards")
        for i, s in enumerate(shards):
            if s.size == 0:
                raise ValueError(f"shard {i} is empty")
            s.setflags(write=False)
        object.__setattr__(self, "client_shards", shards)
        object.__setattr__(self, "cluster_of_client", truth)

    @property
    def n_clients(self) -> int:
        return len(self.client_shards)

    def validate_against(self, n_samples: int) -> None:
        """Raise if shards overlap or point outside ``[0, n_samples)``."""
        seen = np.zeros(n_samples, dtype=bool)
        for i, s in enumerate(self.client_shards):
            if s.min() < 0 or s.max() >= n_samples:
                raise ValueError(f"shard {i} indexes outside the dataset")
            if seen[s].any() or np.unique(s).size != s.size:
                raise ValueError(f"shard {i} overlaps another shard")
            seen[s] = True

    def to_json(self) -> str:
        doc = {
            "seed": int(self.seed),
            "cluster_of_client": list(self.cluster_of_client),
            "shards": [s.tolist() for s in self.client_shards],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        doc = json.loads(text)
        return cls(tuple(doc["shards"]), tuple(doc["cluster_of_client"]), int(doc["seed"]))


@dataclass(frozen=True)
class SyntheticSpec:
    """Desk-scale concept-shift task.

    Every ground-truth cluster shares one Gaussian mixture over features but
    relabels it with its own class permutation. ``cluster_separation`` scales
    how far a cluster's class-conditional means move from the shared ones
    toward the permuted ones: 0 makes all clusters identical, 1 is a pure
    label permutation. ``size_ratio`` spreads client shard sizes linearly
    from ``samples_per_client`` up to ``size_ratio * samples_per_client``.
    """

    n_clusters_true: int = 4
    clients_per_cluster: int = 10
    samples_per_client: int = 100
    n_features: int = 10
    n_classes: int = 4
    cluster_separation: float = 1.0
    noise_std: float = 1.0
    seed: int = 0
    size_ratio: float = 1.0

    def __post_init__(self):
        for name in ("n_clusters_true", "clients_per_cluster", "samples_per_client",
                     "n_features", "n_classes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be > 0")
        if not self.cluster_separation >= 0:
            raise ValueError("cluster_separation must be >= 0")
        if not self.size_ratio >= 1:
            raise ValueError("size_ratio must be >= 1")


def _distinct_permutations(rng: np.random.Generator, n_classes: int, k: int) -> list[np.ndarray]:
    n_possible = 1
    for j in range(2, n_classes + 1):
        n_possible *= j
        if n_possible >= k:
            break
    perms: list[np.ndarray] = []
    seen: set[tuple] = set()
    while len(perms) < k:
        p = rng.permutation(n_classes)
        key = tuple(p.tolist())
        if key in seen and n_possible >= k:
            continue
        seen.add(key)
        perms.append(p)
    return perms


def client_sizes(spec: SyntheticSpec) -> list[int]:
    n = spec.clients_per_cluster
    if n == 1:
        return [spec.samples_per_client]
    grid = np.linspace(1.0, spec.size_ratio, n)
    return [int(round(spec.samples_per_client * g)) for g in grid]


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Partition]:
    rng = np.random.default_rng(spec.seed)
    C, d = spec.n_classes, spec.n_features
    prototypes = rng.normal(size=(C, d))
    perms = _distinct_permutations(rng, C, spec.n_clusters_true)
    sizes = client_sizes(spec)

    feats, labels, shards, truth = [], [], [], []
    offset = 0
    for k in range(spec.n_clusters_true):
        # class-conditional means of cluster k, indexed by label
        means = prototypes + spec.cluster_separation * (prototypes[perms[k]] - prototypes)
        for n in sizes:
            y = rng.integers(0, C, size=n)
            x = means[y] + spec.noise_std * rng.normal(size=(n, d))
            feats.append(x)
            labels.append(y)
            shards.append(np.arange(offset, offset + n))
            truth.append(k)
            offset += n
    data = Dataset(np.concatenate(feats), np.concatenate(labels), C)
    return data, Partition(tuple(shards), tuple(truth), spec.seed)


def largest_remainder(total: int, proportions: Sequence[float]) -> np.ndarray:
    """Integer counts summing to ``total`` that follow ``proportions``.

    Floors first, then hands the leftover units to the largest fractional
    parts; ties go to the lowest index.
    """
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = total * p
    counts = np.floor(raw).astype(np.int64)
    leftover = int(total - counts.sum())
    if leftover > 0:
        frac = raw - counts
        order = np.lexsort((np.arange(p.size), -frac))
        counts[order[:leftover]] += 1
    return counts


def _repair_empty(shards: list[list[int]]) -> None:
    while True:
        empty = [i for i, s in enumerate(shards) if not s]
        if not empty:
            return
        sizes = [len(s) for s in shards]
        donor = int(np.argmax(sizes))
        if sizes[donor] < 2:
            raise ValueError("not enough samples to give every client at least one")
        shards[empty[0]].append(shards[donor].pop())


def _check_split(d: Dataset, m: int, k_true: int) -> None:
    if m < 1 or k_true < 1:
        raise ValueError("m and k_true must be >= 1")
    if m % k_true:
        raise ValueError(f"m={m} is not divisible by k_true={k_true}")
    if len(d) < m:
        raise ValueError(f"dataset has {len(d)} samples, fewer than m={m} clients")


def dirichlet_partition(d: Dataset, m: int, k_true: int, alpha_cluster: float,
                        alpha_client: float, seed: int) -> Partition:
    """Two-level Dirichlet split: classes over clusters, then within each cluster over clients."""
    _check_split(d, m, k_true)
    if not (alpha_cluster > 0 and alpha_client > 0):
        raise ValueError("Dirichlet concentrations must be > 0")
    rng = np.random.default_rng(seed)
    per_cluster = m // k_true
    shards: list[list[int]] = [[] for _ in range(m)]
    for c in range(d.n_classes):
        idx = np.flatnonzero(d.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        to_clusters = largest_remainder(idx.size, rng.dirichlet(np.full(k_true, alpha_cluster)))
        start = 0
        for k in range(k_true):
            chunk = idx[start:start + to_clusters[k]]
            start += to_clusters[k]
            to_clients = largest_remainder(chunk.size, rng.dirichlet(np.full(per_cluster, alpha_client)))
            s = 0
            for j in range(per_cluster):
                shards[k * per_cluster + j].extend(chunk[s:s + to_clients[j]].tolist())
                s += to_clients[j]
    _repair_empty(shards)
    truth = tuple(i // per_cluster for i in range(m))
    return Partition(tuple(sorted(s) for s in shards), truth, seed)


def nclass_partition(d: Dataset, m: int, k_true: int, n_cluster_classes: int,
                     n_client_classes: int, seed: int) -> Partition:
    """Give each cluster ``n_cluster_classes`` classes and each client ``n_client_classes`` of them.

    A class's samples are dealt round-robin over every client holding it, so
    holders of the same class differ by at most one sample.
    """
    _check_split(d, m, k_true)
    if not 1 <= n_client_classes <= n_cluster_classes <= d.n_classes:
        raise ValueError("need 1 <= n_client_classes <= n_cluster_classes <= n_classes")
    hist = d.class_histogram()
    if (hist == 0).any():
        raise ValueError(f"classes {np.flatnonzero(hist == 0).tolist()} have zero samples")
    rng = np.random.default_rng(seed)
    per_cluster = m // k_true
    client_classes: list[np.ndarray] = []
    for _ in range(k_true):
        cluster_classes = np.sort(rng.choice(d.n_classes, n_cluster_classes, replace=False))
        for _ in range(per_cluster):
            client_classes.append(np.sort(rng.choice(cluster_classes, n_client_classes, replace=False)))

    shards: list[list[int]] = [[] for _ in range(m)]
    for c in range(d.n_classes):
        holders = [i for i, cls in enumerate(client_classes) if c in cls]
        if not holders:
            continue
        if hist[c] < len(holders):
            raise ValueError(f"class {c} has {hist[c]} samples for {len(holders)} holders")
        idx = rng.permutation(np.flatnonzero(d.labels == c))
        for j, sample in enumerate(idx):
            shards[holders[j % len(holders)]].append(int(sample))
    truth = tuple(i // per_cluster for i in range(m))
    return Partition(tuple(sorted(s) for s in shards), truth, seed)


def _open_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, n_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into a flattened [0, 1] dataset."""
    img = _open_maybe_gzip(images_path)
    lab = _open_maybe_gzip(labels_path)
    if len(img) < 16:
        raise IdxTruncatedError(f"{images_path}: header shorter than 16 bytes")
    if len(lab) < 8:
        raise IdxTruncatedError(f"{labels_path}: header shorter than 8 bytes")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxMagicError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    lmagic, n_labels = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise IdxMagicError(f"{labels_path}: magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if n != n_labels:
        raise IdxCountMismatchError(f"{n} images but {n_labels} labels")
    body = n * rows * cols
    if len(img) - 16 < body:
        raise IdxTruncatedError(f"{images_path}: expected {body} pixel bytes, found {len(img) - 16}")
    if len(lab) - 8 < n_labels:
        raise IdxTruncatedError(f"{labels_path}: expected {n_labels} label bytes, found {len(lab) - 8}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=body, offset=16)
    features = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if n_labels else 1
    return Dataset(features, labels, n_classes)


def train_test_split(indices, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle one client's shard and carve off a test part; the train part is never empty."""
    idx = rng.permutation(np.asarray(indices, dtype=np.int64))
    n_test = int(round(test_fraction * idx.size))
    n_test = min(n_test, idx.size - 1)
    return np.sort(idx[n_test:]), np.sort(idx[:n_test])
