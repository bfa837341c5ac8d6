"""
Aggregation rules.

Every rule takes the updates of one aggregation step plus an
AggregationContext and returns one ParameterVector, so strategies can be
swapped by name. The trust-scored rule and the cross-cloud combination also
expose their weights for the round metrics.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from cloudfl.config.models import Strategy
from cloudfl.errors import ConfigurationError, ContractViolation
from cloudfl.linalg import (
    EPS_NORM,
    ParameterVector,
    cosine_similarity,
    l2_norm,
    last_layer_view,
    mean_vector,
    stack,
    weighted_sum,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AggregationContext:
    """Side information an aggregation step may need."""

    sample_counts: Optional[Sequence[int]] = None
    ref_update: Optional[ParameterVector] = None
    r_hat: Optional[Sequence[float]] = None
    krum_f: Optional[int] = None
    trim_fraction: float = 0.1
    full_vector_trust: bool = False
    normalize_updates: bool = True


@dataclass(frozen=True)
class TrustResult:
    update: ParameterVector
    scores: np.ndarray
    used_reference: bool = False


def _check_updates(updates: Sequence[ParameterVector], who: str) -> None:
    if len(updates) == 0:
        raise ContractViolation(f"{who} needs at least one update")


# --- Trust-scored aggregation ---

def trust_scores(
    updates: Sequence[ParameterVector],
    ref_update: ParameterVector,
    r_hat: Sequence[float],
    *,
    full_vector: bool = False,
) -> np.ndarray:
    """TS_i = max(0, cos(g_i, g_ref)) * r_hat_i on the last layer (or the full vector)."""
    _check_updates(updates, "trust_scores")
    if len(r_hat) != len(updates):
        raise ContractViolation(f"{len(r_hat)} reputations for {len(updates)} updates")
    if l2_norm(ref_update) <= EPS_NORM:
        raise ConfigurationError("reference update is zero; trust scores are undefined")

    view = (lambda v: v.values) if full_vector else last_layer_view
    ref = view(ref_update)
    scores = np.zeros(len(updates))
    for i, g in enumerate(updates):
        if g.layer_map != ref_update.layer_map:
            raise ContractViolation("update and reference have different layer maps")
        if l2_norm(g) <= EPS_NORM:
            continue
        scores[i] = max(0.0, cosine_similarity(view(g), ref)) * float(r_hat[i])
    return scores


def normalize_update(g: ParameterVector, g_ref: ParameterVector) -> ParameterVector:
    """Rescale g to the reference norm: (||g_ref|| / ||g||) * g."""
    norm = l2_norm(g)
    if norm <= EPS_NORM:
        raise ContractViolation("cannot normalize a zero update")
    return g.scale(l2_norm(g_ref) / norm)


def trust_aggregate(
    updates: Sequence[ParameterVector],
    ref_update: ParameterVector,
    r_hat: Sequence[float],
    *,
    normalize_updates: bool = True,
    full_vector: bool = False,
) -> TrustResult:
    """Sum of TS_i * g~_i / sum(TS); the reference update itself when every score is zero."""
    scores = trust_scores(updates, ref_update, r_hat, full_vector=full_vector)
    total = scores.sum()
    if total <= 0:
        logger.warning(f"[Aggregation] All {len(updates)} trust scores are zero; falling back to the reference update")
        return TrustResult(ref_update, scores, used_reference=True)

    kept = [i for i in range(len(updates)) if scores[i] > 0]
    vectors = [normalize_update(updates[i], ref_update) if normalize_updates else updates[i] for i in kept]
    return TrustResult(weighted_sum(vectors, [scores[i] / total for i in kept]), scores)


def aggregate_trustfl(
    updates: Sequence[ParameterVector],
    ref_update: ParameterVector,
    r_hat: Sequence[float],
    *,
    normalize_updates: bool = True,
    full_vector: bool = False,
) -> ParameterVector:
    return trust_aggregate(
        updates, ref_update, r_hat, normalize_updates=normalize_updates, full_vector=full_vector
    ).update


def aggregate_fltrust(
    updates: Sequence[ParameterVector],
    ref_update: ParameterVector,
    *,
    normalize_updates: bool = True,
    full_vector: bool = False,
) -> ParameterVector:
    """Trust aggregation with reputation fixed to 1/N."""
    _check_updates(updates, "aggregate_fltrust")
    uniform = [1.0 / len(updates)] * len(updates)
    return aggregate_trustfl(
        updates, ref_update, uniform, normalize_updates=normalize_updates, full_vector=full_vector
    )


# --- Cross-cloud step ---

def aggregate_crosscloud(
    cloud_updates: Sequence[ParameterVector],
    cloud_refs: Sequence[ParameterVector],
    cloud_sizes: Sequence[float],
) -> Tuple[ParameterVector, np.ndarray]:
    """
    beta_k proportional to max(0, cos(g_k, mean of the references)) * n_k.

    Returns (sum of beta_k * g_k, beta). Uniform beta when every weight is zero.
    """
    _check_updates(cloud_updates, "aggregate_crosscloud")
    if not len(cloud_updates) == len(cloud_refs) == len(cloud_sizes):
        raise ContractViolation("cloud updates, references and sizes differ in length")

    ref_mean = mean_vector(cloud_refs)
    raw = np.array([
        max(0.0, cosine_similarity(g, ref_mean)) * float(n) for g, n in zip(cloud_updates, cloud_sizes)
    ])
    if raw.sum() <= 0:
        logger.warning(f"[Aggregation] Every cloud trust weight is zero; using uniform beta over {len(cloud_updates)} clouds")
        beta = np.full(len(cloud_updates), 1.0 / len(cloud_updates))
    else:
        beta = raw / raw.sum()
    return weighted_sum(cloud_updates, beta), beta


def combine_by_counts(cloud_updates: Sequence[ParameterVector], counts: Sequence[float]) -> Tuple[ParameterVector, np.ndarray]:
    """Cross-cloud step of the baselines: clouds weighted by their participants' sample counts."""
    _check_updates(cloud_updates, "combine_by_counts")
    counts = np.asarray(counts, dtype=np.float64)
    beta = counts / counts.sum() if counts.sum() > 0 else np.full(counts.size, 1.0 / counts.size)
    return weighted_sum(cloud_updates, beta), beta


# --- Baselines ---

def aggregate_fedavg(updates: Sequence[ParameterVector], sample_counts: Sequence[int]) -> ParameterVector:
    """Sample-weighted mean."""
    _check_updates(updates, "aggregate_fedavg")
    counts = np.asarray(sample_counts, dtype=np.float64)
    if counts.size != len(updates):
        raise ContractViolation(f"{counts.size} sample counts for {len(updates)} updates")
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ContractViolation("sample counts must be non-negative with a positive sum")
    return weighted_sum(updates, counts / counts.sum())


def krum_scores(updates: Sequence[ParameterVector], num_malicious_bound: int) -> np.ndarray:
    """Sum of squared distances from each update to its N - f - 2 nearest neighbours."""
    n = len(updates)
    if n < 2 * num_malicious_bound + 3:
        raise ConfigurationError(f"Krum needs N >= 2f + 3 (N={n}, f={num_malicious_bound})")
    X = stack(updates)
    distances = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            distances[i, j] = distances[j, i] = np.sum((X[i] - X[j]) ** 2)
    closest = n - num_malicious_bound - 2
    return np.array([np.sort(np.delete(distances[i], i))[:closest].sum() for i in range(n)])


def aggregate_krum(updates: Sequence[ParameterVector], num_malicious_bound: int) -> ParameterVector:
    """The update with the lowest Krum score (ties to the lowest index)."""
    _check_updates(updates, "aggregate_krum")
    return updates[int(np.argmin(krum_scores(updates, num_malicious_bound)))]


def aggregate_trimmed_mean(updates: Sequence[ParameterVector], trim_fraction: float) -> ParameterVector:
    """Coordinate-wise mean after dropping the ⌊trim_fraction·N⌋ lowest and highest values."""
    _check_updates(updates, "aggregate_trimmed_mean")
    if not 0.0 <= trim_fraction < 0.5:
        raise ConfigurationError(f"trim_fraction must lie in [0, 0.5), got {trim_fraction}")
    n = len(updates)
    k = int(math.floor(trim_fraction * n))
    if n - 2 * k < 1:
        raise ConfigurationError(f"trimming {k} per side leaves nothing of {n} updates")
    ordered = np.sort(stack(updates), axis=0)
    return updates[0].with_values(ordered[k:n - k].mean(axis=0))


def aggregate_median(updates: Sequence[ParameterVector]) -> ParameterVector:
    """Coordinate-wise median (mean of the middle two for even N)."""
    _check_updates(updates, "aggregate_median")
    return updates[0].with_values(np.median(stack(updates), axis=0))


# --- Registry ---

def _largest_krum_f(n: int) -> int:
    return max(0, (n - 3) // 2)


def _require(value, name: str, strategy: Strategy):
    if value is None:
        raise ContractViolation(f"strategy '{strategy.value}' needs {name} in the aggregation context")
    return value


Aggregator = Callable[[Sequence[ParameterVector], AggregationContext], ParameterVector]

AGGREGATORS: Dict[Strategy, Aggregator] = {
    Strategy.FEDAVG: lambda updates, ctx: aggregate_fedavg(
        updates, _require(ctx.sample_counts, "sample_counts", Strategy.FEDAVG)),
    Strategy.KRUM: lambda updates, ctx: aggregate_krum(
        updates, ctx.krum_f if ctx.krum_f is not None else _largest_krum_f(len(updates))),
    Strategy.TRIMMED_MEAN: lambda updates, ctx: aggregate_trimmed_mean(updates, ctx.trim_fraction),
    Strategy.MEDIAN: lambda updates, ctx: aggregate_median(updates),
    Strategy.FLTRUST: lambda updates, ctx: aggregate_fltrust(
        updates, _require(ctx.ref_update, "ref_update", Strategy.FLTRUST),
        normalize_updates=ctx.normalize_updates, full_vector=ctx.full_vector_trust),
    Strategy.COST_TRUSTFL: lambda updates, ctx: aggregate_trustfl(
        updates,
        _require(ctx.ref_update, "ref_update", Strategy.COST_TRUSTFL),
        _require(ctx.r_hat, "r_hat", Strategy.COST_TRUSTFL),
        normalize_updates=ctx.normalize_updates, full_vector=ctx.full_vector_trust),
}


def aggregate(strategy, updates: Sequence[ParameterVector], ctx: AggregationContext) -> ParameterVector:
    """Dispatch by strategy name or Strategy member."""
    try:
        strategy = Strategy(strategy)
    except ValueError as e:
        names = ", ".join(s.value for s in Strategy)
        raise ConfigurationError(f"unknown strategy '{strategy}' (expected one of: {names})") from e
    return AGGREGATORS[strategy](updates, ctx)
