"""
Contribution scores, reputation smoothing and Shapley oracles.

Per round, every participating client gets a contribution score

    phi_i = max(0, cos(g_i[last], mean(g)[last])) * ||g_i[last]||

which is normalized into r and folded into the smoothed reputation r_hat with
an exponential moving average. The exact and Monte Carlo Shapley oracles are
used offline to check how well phi tracks true Shapley values.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, Iterable, Optional, Sequence

import numpy as np

from cloudfl.errors import (
    ContractViolation,
    InvariantViolation,
    ShapleyGuardError,
    UndefinedCorrelationError,
)
from cloudfl.linalg import ParameterVector, cosine_similarity, l2_norm, last_layer_view, mean_vector

logger = logging.getLogger(__name__)

EXACT_SHAPLEY_MAX_PLAYERS = 16
SUM_TOLERANCE = 1e-9

Characteristic = Callable[[FrozenSet[int]], float]


def _frozen(values) -> np.ndarray:
    array = np.array(values, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class ReputationState:
    """phi (last round's scores), r (normalized) and the smoothed r_hat, one entry per client."""

    phi: np.ndarray
    r: np.ndarray
    r_hat: np.ndarray
    gamma: float

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation(f"gamma must lie in [0, 1), got {self.gamma}")
        for name in ("phi", "r", "r_hat"):
            array = _frozen(getattr(self, name))
            if np.any(array < 0):
                raise InvariantViolation(f"reputation field {name} has negative entries")
            object.__setattr__(self, name, array)
        if abs(self.r_hat.sum() - 1.0) > SUM_TOLERANCE:
            raise InvariantViolation(f"r_hat sums to {self.r_hat.sum():.12f}, expected 1")

    @classmethod
    def initial(cls, num_clients: int, gamma: float) -> "ReputationState":
        """r_hat = 1/N for every client."""
        if num_clients < 1:
            raise ContractViolation("need at least one client")
        uniform = np.full(num_clients, 1.0 / num_clients)
        return cls(phi=np.zeros(num_clients), r=uniform, r_hat=uniform, gamma=gamma)

    @property
    def num_clients(self) -> int:
        return self.r_hat.size


# --- Scores and smoothing ---

def contribution_scores(updates: Sequence[ParameterVector]) -> np.ndarray:
    """phi_i from the last-layer slices, against the unweighted mean of `updates`."""
    if len(updates) == 0:
        raise ContractViolation("contribution_scores needs at least one update")
    mean_last = last_layer_view(mean_vector(updates))
    scores = []
    for g in updates:
        last = last_layer_view(g)
        scores.append(max(0.0, cosine_similarity(last, mean_last)) * l2_norm(last))
    return np.array(scores)


def normalize(phi: Sequence[float]) -> np.ndarray:
    """phi / sum(phi); uniform when every score is zero."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.size == 0:
        raise ContractViolation("normalize needs at least one score")
    if np.any(phi < 0):
        raise ContractViolation("contribution scores must be non-negative")
    total = phi.sum()
    if total <= 0:
        return np.full(phi.size, 1.0 / phi.size)
    return phi / total


def ema_update(state: ReputationState, r_new: Sequence[float]) -> ReputationState:
    """r_hat <- gamma * r_hat + (1 - gamma) * r_new."""
    r_new = np.asarray(r_new, dtype=np.float64)
    if r_new.shape != state.r_hat.shape:
        raise ContractViolation(f"r_new has {r_new.size} entries for {state.num_clients} clients")
    if abs(r_new.sum() - 1.0) > SUM_TOLERANCE:
        raise ContractViolation(f"r_new must be normalized (sums to {r_new.sum():.12f})")
    r_hat = state.gamma * state.r_hat + (1.0 - state.gamma) * r_new
    return ReputationState(phi=state.phi, r=r_new, r_hat=r_hat, gamma=state.gamma)


def redistribute(r_hat: Sequence[float], groups: Sequence[Sequence[int]], phi_groups: Sequence[Sequence[float]]) -> np.ndarray:
    """
    Per-group normalization that only moves the reputation mass the group holds.

    For every group S (one cloud's participants): r_S = (sum of r_hat over S) * normalize(phi_S).
    Clients outside every group keep their r_hat, so the result still sums to 1.
    """
    r = np.array(r_hat, dtype=np.float64, copy=True)
    for members, phi in zip(groups, phi_groups):
        members = list(members)
        if not members:
            continue
        if len(phi) != len(members):
            raise ContractViolation(f"{len(phi)} scores for {len(members)} participants")
        if np.sum(phi) <= 0:
            logger.warning(f"[Reputation] All contribution scores are zero for participants {members}; keeping uniform shares")
        mass = float(np.sum(r[members]))
        r[members] = mass * normalize(phi)
    return r


def record_scores(state: ReputationState, groups: Sequence[Sequence[int]], phi_groups: Sequence[Sequence[float]]) -> ReputationState:
    """One round of reputation bookkeeping: store phi, redistribute, smooth."""
    phi = np.zeros(state.num_clients)
    for members, scores in zip(groups, phi_groups):
        phi[list(members)] = scores
    smoothed = ema_update(state, redistribute(state.r_hat, groups, phi_groups))
    return ReputationState(phi=phi, r=smoothed.r, r_hat=smoothed.r_hat, gamma=state.gamma)


# --- Shapley oracles ---

def _evaluate(characteristic: Characteristic, coalitions: Iterable[FrozenSet[int]], max_workers: Optional[int]) -> Dict[FrozenSet[int], float]:
    coalitions = list(coalitions)
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            values = list(pool.map(characteristic, coalitions))
    else:
        values = [characteristic(c) for c in coalitions]
    return {c: float(v) for c, v in zip(coalitions, values)}


def exact_shapley(characteristic: Characteristic, num_clients: int, max_workers: Optional[int] = None) -> np.ndarray:
    """Shapley values by full enumeration of the 2^N coalitions."""
    if num_clients < 1:
        raise ContractViolation("exact_shapley needs at least one player")
    if num_clients > EXACT_SHAPLEY_MAX_PLAYERS:
        raise ShapleyGuardError(
            f"exact_shapley is limited to {EXACT_SHAPLEY_MAX_PLAYERS} players (got {num_clients}); "
            f"use monte_carlo_shapley instead"
        )

    masks = np.arange(1 << num_clients)
    coalitions = [frozenset(i for i in range(num_clients) if mask >> i & 1) for mask in masks]
    table = _evaluate(characteristic, coalitions, max_workers)
    values = np.array([table[c] for c in coalitions])

    sizes = np.array([len(c) for c in coalitions])
    n_fact = math.factorial(num_clients)
    weight_by_size = np.array([
        math.factorial(s) * math.factorial(num_clients - s - 1) / n_fact for s in range(num_clients)
    ])

    shapley = np.zeros(num_clients)
    for i in range(num_clients):
        without = masks[(masks >> i & 1) == 0]
        marginal = values[without | (1 << i)] - values[without]
        shapley[i] = np.sum(weight_by_size[sizes[without]] * marginal)
    return shapley


def monte_carlo_shapley(
    characteristic: Characteristic,
    num_clients: int,
    num_permutations: int,
    seed: int,
    max_workers: Optional[int] = None,
) -> np.ndarray:
    """Permutation-sampling estimate; every coalition is evaluated once."""
    if num_clients < 1:
        raise ContractViolation("monte_carlo_shapley needs at least one player")
    if num_permutations < 1:
        raise ContractViolation("num_permutations must be >= 1")

    rng = np.random.default_rng(seed)
    permutations = [rng.permutation(num_clients) for _ in range(num_permutations)]

    needed: Dict[FrozenSet[int], None] = {frozenset(): None}
    for perm in permutations:
        for k in range(1, num_clients + 1):
            needed.setdefault(frozenset(int(i) for i in perm[:k]), None)
    table = _evaluate(characteristic, needed, max_workers)

    totals = np.zeros(num_clients)
    for perm in permutations:
        previous = table[frozenset()]
        for k in range(1, num_clients + 1):
            current = table[frozenset(int(i) for i in perm[:k])]
            totals[perm[k - 1]] += current - previous
            previous = current
    return totals / num_permutations


def shapley_correlation(approx: Sequence[float], exact: Sequence[float]) -> float:
    """Pearson correlation between two value vectors."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    if approx.shape != exact.shape or approx.ndim != 1:
        raise ContractViolation(f"shapley_correlation inputs differ in shape: {approx.shape} vs {exact.shape}")
    if approx.size < 3:
        raise ContractViolation("shapley_correlation needs at least 3 players")
    if np.ptp(approx) == 0 or np.ptp(exact) == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    return float(np.clip(np.corrcoef(approx, exact)[0, 1], -1.0, 1.0))
