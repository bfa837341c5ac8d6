"""
Poisoning attacks run by malicious clients.

label_flip rewrites the attacker's shard once, before any training. The
update-level attacks (gaussian, sign_flip, scale) rewrite the model update
after honest local training.
"""
import logging
import math
from typing import FrozenSet, Optional

import numpy as np
from tenacity import RetryError, retry, retry_if_exception_type, stop_after_attempt

from cloudfl.config.models import AttackConfig, AttackKind
from cloudfl.data import Dataset
from cloudfl.economy import CloudTopology
from cloudfl.errors import ConfigurationError, ContractViolation
from cloudfl.linalg import ParameterVector

logger = logging.getLogger(__name__)

UPDATE_ATTACKS = frozenset({AttackKind.GAUSSIAN, AttackKind.SIGN_FLIP, AttackKind.SCALE})
MAX_ASSIGNMENT_DRAWS = 10_000


class _NoBenignMajority(Exception):
    """Drawn malicious set leaves every cloud without a strict benign majority."""


def malicious_count(num_clients: int, fraction: float) -> int:
    return int(math.floor(fraction * num_clients + 1e-9))


def has_benign_majority(malicious, topology: CloudTopology) -> bool:
    """True when at least one cloud has strictly more benign than malicious clients."""
    for cloud in range(topology.num_clouds):
        members = topology.clients_in(cloud)
        bad = sum(1 for i in members if i in malicious)
        if 2 * (len(members) - bad) > len(members):
            return True
    return False


def _max_malicious(topology: CloudTopology) -> int:
    """Largest malicious count that can still leave one cloud benign-majority."""
    n = topology.num_clients
    return max((n - n_k) + math.ceil(n_k / 2) - 1 for n_k in topology.cloud_sizes())


@retry(
    retry=retry_if_exception_type(_NoBenignMajority),
    stop=stop_after_attempt(MAX_ASSIGNMENT_DRAWS),
)
def _draw_malicious(rng: np.random.Generator, num_clients: int, count: int, topology: CloudTopology) -> FrozenSet[int]:
    chosen = frozenset(int(i) for i in rng.choice(num_clients, size=count, replace=False))
    if not has_benign_majority(chosen, topology):
        raise _NoBenignMajority()
    return chosen


def assign_malicious(num_clients: int, fraction: float, topology: CloudTopology, seed: int) -> FrozenSet[int]:
    """
    Pick ⌊fraction·N⌋ malicious clients uniformly at random, redrawing until some
    cloud keeps a strict benign majority.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigurationError(f"malicious fraction must lie in [0, 1], got {fraction}")
    if num_clients != topology.num_clients:
        raise ContractViolation(f"num_clients={num_clients} but topology has {topology.num_clients}")

    count = malicious_count(num_clients, fraction)
    if count == 0:
        return frozenset()
    if count > _max_malicious(topology):
        raise ConfigurationError(
            f"{count} malicious clients out of {num_clients} cannot leave any cloud with a benign majority "
            f"(at most {_max_malicious(topology)} for cloud sizes {topology.cloud_sizes()})"
        )

    rng = np.random.default_rng(seed)
    try:
        chosen = _draw_malicious(rng, num_clients, count, topology)
    except RetryError as e:
        raise ConfigurationError(
            f"no benign-majority assignment of {count} malicious clients found in {MAX_ASSIGNMENT_DRAWS} draws"
        ) from e
    logger.info(f"[Attacks] {count}/{num_clients} malicious clients: {sorted(chosen)}")
    return chosen


# --- Data-level ---

def derangement(num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation of class ids with no fixed point."""
    if num_classes < 2:
        raise ConfigurationError("label flipping needs at least 2 classes")
    identity = np.arange(num_classes)
    while True:
        perm = rng.permutation(num_classes)
        if not np.any(perm == identity):
            return perm


def flip_labels(shard: Dataset, num_classes: int, seed: int) -> Dataset:
    """Relabel every sample c -> π(c) with a seeded derangement π; features untouched."""
    perm = derangement(num_classes, np.random.default_rng(seed))
    if len(shard) == 0:
        return shard
    return shard.with_labels(perm[shard.labels])


# --- Update-level ---

def perturb_update(g: ParameterVector, cfg: AttackConfig, seed: int, sigma: Optional[float] = None) -> ParameterVector:
    """
    gaussian: g + N(0, sigma²I); sign_flip: -g; scale: scale_factor·g.

    `sigma` overrides cfg.sigma (the orchestrator passes the adaptive value).
    """
    if cfg.kind == AttackKind.SIGN_FLIP:
        return -g
    if cfg.kind == AttackKind.SCALE:
        return g.scale(cfg.scale_factor)
    if cfg.kind == AttackKind.GAUSSIAN:
        std = sigma if sigma is not None else cfg.sigma
        if std is None:
            raise ContractViolation("gaussian attack needs sigma (explicit or measured)")
        if std == 0:
            return g
        noise = np.random.default_rng(seed).normal(0.0, std, size=len(g))
        return g.with_values(g.values + noise)
    raise ContractViolation(f"perturb_update does not handle attack kind '{cfg.kind.value}'")
