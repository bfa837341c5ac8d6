"""
Synthetic data, Dirichlet non-IID partitioning and reference-shard carving.

External datasets use a simple comma-separated columnar file:

    feature_dim,num_classes          <- header line
    f_1,f_2,...,f_feature_dim,label  <- one row per sample, label is an int
"""
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from cloudfl.economy import CloudTopology
from cloudfl.errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if features.ndim != 2:
            raise ContractViolation(f"features must be a 2-D matrix, got shape {features.shape}")
        if features.shape[0] != labels.size:
            raise ContractViolation(f"{features.shape[0]} feature rows but {labels.size} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ContractViolation(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.features, labels, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @classmethod
    def empty(cls, feature_dim: int, num_classes: int) -> "Dataset":
        return cls(np.zeros((0, feature_dim)), np.zeros(0, dtype=np.int64), num_classes)

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ContractViolation("cannot concatenate zero datasets")
        return cls(
            np.vstack([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].num_classes,
        )


@dataclass(frozen=True)
class Partition:
    """Client shards plus the ids of clients left without data."""

    shards: Tuple[Dataset, ...]
    empty_clients: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.shards)

    def __iter__(self) -> Iterator[Dataset]:
        return iter(self.shards)

    def __getitem__(self, index: int) -> Dataset:
        return self.shards[index]


@dataclass(frozen=True)
class FederatedSplit:
    client_shards: Tuple[Dataset, ...]
    reference_shards: Tuple[Dataset, ...]


# --- Generation and loading ---

def generate_synthetic(
    num_classes: int,
    samples_per_class: int,
    feature_dim: int,
    seed: int,
    *,
    cluster_std: float = 1.0,
    center_distance: float = 4.0,
) -> Dataset:
    """Gaussian class blobs, centers at `center_distance` from the origin."""
    if min(num_classes, samples_per_class, feature_dim) <= 0:
        raise ContractViolation("generate_synthetic needs positive counts")
    rng = np.random.default_rng(seed)

    if num_classes <= feature_dim:
        # scaled simplex: one axis per class
        centers = np.zeros((num_classes, feature_dim))
        centers[np.arange(num_classes), np.arange(num_classes)] = center_distance
    else:
        directions = rng.normal(size=(num_classes, feature_dim))
        centers = center_distance * directions / np.linalg.norm(directions, axis=1, keepdims=True)

    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = centers[labels] + rng.normal(scale=cluster_std, size=(labels.size, feature_dim))
    order = rng.permutation(labels.size)
    return Dataset(features[order], labels[order], num_classes)


def load_columnar(path: str) -> Dataset:
    """Read a columnar dataset file (see module docstring)."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline()
        feature_dim, num_classes = (int(x) for x in header.strip().split(","))
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"{path}: cannot read dataset: {e}") from e
    if table.shape[1] != feature_dim + 1:
        raise ConfigurationError(f"{path}: expected {feature_dim + 1} columns, found {table.shape[1]}")
    labels = table[:, -1]
    if not np.all(labels == np.round(labels)):
        raise ConfigurationError(f"{path}: labels must be integers")
    return Dataset(table[:, :-1], labels.astype(np.int64), num_classes)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Random (train, test) split fixed by the seed."""
    order = np.random.default_rng(seed).permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


# --- Partitioning ---

def dirichlet_partition(data: Dataset, num_clients: int, alpha: float, seed: int) -> Partition:
    """Split every class over clients with proportions p_c ~ Dir(alpha·1)."""
    if num_clients < 1:
        raise ContractViolation("num_clients must be >= 1")
    if alpha <= 0:
        raise ContractViolation("alpha must be > 0")

    rng = np.random.default_rng(seed)
    assigned: List[List[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(data.num_classes):
        idx_c = np.flatnonzero(data.labels == c)
        if idx_c.size == 0:
            continue
        rng.shuffle(idx_c)
        proportions = rng.dirichlet(np.full(num_clients, alpha))
        cuts = (np.cumsum(proportions)[:-1] * idx_c.size).astype(int)
        for client, part in enumerate(np.split(idx_c, cuts)):
            assigned[client].append(part)

    shards, empty = [], []
    for client, parts in enumerate(assigned):
        indices = np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
        if indices.size == 0:
            empty.append(client)
        shards.append(data.subset(indices))
    if empty:
        logger.warning(f"[Data] Dirichlet(alpha={alpha}) left {len(empty)} client(s) without samples: {empty}")
    return Partition(tuple(shards), tuple(empty))


def _stratified_quotas(available: np.ndarray, total: int) -> np.ndarray:
    """Spread `total` picks evenly over the classes present, capped by availability."""
    quotas = np.zeros_like(available)
    remaining = total
    while remaining > 0:
        open_classes = np.flatnonzero(quotas < available)
        share, extra = divmod(remaining, open_classes.size)
        for rank, c in enumerate(open_classes):
            take = min(share + (1 if rank < extra else 0), available[c] - quotas[c])
            quotas[c] += take
            remaining -= take
    return quotas


def carve_reference(
    shards: Sequence[Dataset],
    topology: CloudTopology,
    reference_size: int,
    seed: int,
) -> FederatedSplit:
    """Move `reference_size` class-stratified samples from each cloud's clients into that cloud's reference shard."""
    if len(shards) != topology.num_clients:
        raise ContractViolation(f"{len(shards)} shards for {topology.num_clients} clients")
    if reference_size < 0:
        raise ConfigurationError("reference_size must be >= 0")

    num_classes = shards[0].num_classes
    feature_dim = shards[0].features.shape[1]
    if reference_size == 0:
        empty = tuple(Dataset.empty(feature_dim, num_classes) for _ in range(topology.num_clouds))
        return FederatedSplit(tuple(shards), empty)

    rng = np.random.default_rng(seed)
    keep = [np.ones(len(s), dtype=bool) for s in shards]
    references = []
    for cloud in range(topology.num_clouds):
        members = topology.clients_in(cloud)
        held = pooled([shards[i] for i in members], num_classes, feature_dim)
        if len(held) < reference_size:
            raise ConfigurationError(
                f"cloud {cloud} holds {len(held)} samples, fewer than reference_size={reference_size}"
            )
        # owner client and row of every pooled sample
        owners = np.concatenate([np.full(len(shards[i]), i, dtype=np.int64) for i in members])
        rows = np.concatenate([np.arange(len(shards[i])) for i in members])

        quotas = _stratified_quotas(held.class_counts(), reference_size)
        picked = np.sort(np.concatenate([
            rng.choice(np.flatnonzero(held.labels == c), size=quotas[c], replace=False)
            for c in range(num_classes) if quotas[c]
        ]))
        for j in picked:
            keep[owners[j]][rows[j]] = False
        references.append(held.subset(picked))

    clients = tuple(shard.subset(np.flatnonzero(mask)) for shard, mask in zip(shards, keep))
    return FederatedSplit(clients, tuple(references))


def label_entropy(shard: Dataset) -> float:
    """Shannon entropy (nats) of a shard's label distribution; 0 for an empty shard."""
    counts = shard.class_counts().astype(np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def pooled(shards: Sequence[Dataset], num_classes: Optional[int] = None, feature_dim: Optional[int] = None) -> Dataset:
    """Concatenation of possibly empty shards."""
    non_empty = [s for s in shards if len(s)]
    if non_empty:
        return Dataset.concat(non_empty)
    if num_classes is None or feature_dim is None:
        if not shards:
            raise ContractViolation("pooled() of no shards needs explicit num_classes and feature_dim")
        num_classes, feature_dim = shards[0].num_classes, shards[0].feature_dim
    return Dataset.empty(feature_dim, num_classes)
