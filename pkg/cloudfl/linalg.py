"""
Flat-vector numeric core.

Every model parameter set, local update and reference update in the simulator
is a ParameterVector: one float64 array plus an ordered layer map, so robust
aggregators can work on whole vectors while the reputation engine looks only
at the last layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

from cloudfl.errors import ContractViolation, InvariantViolation

# Vectors with a norm below this carry no direction.
EPS_NORM = 1e-12


class LayerSegment(NamedTuple):
    name: str
    start: int
    length: int


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Immutable parameter/gradient vector with a contiguous layer map."""

    values: np.ndarray
    layer_map: tuple[LayerSegment, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        layer_map = tuple(LayerSegment(str(n), int(s), int(l)) for n, s, l in self.layer_map)

        cursor = 0
        for segment in layer_map:
            if segment.start != cursor or segment.length <= 0:
                raise ContractViolation(
                    f"layer_map segment {segment.name!r} at {segment.start} breaks contiguity (expected start {cursor})"
                )
            cursor += segment.length
        if cursor != values.size:
            raise ContractViolation(f"layer_map covers {cursor} entries but vector has {values.size}")
        if not np.all(np.isfinite(values)):
            raise InvariantViolation("ParameterVector contains NaN or Inf entries")

        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layer_map", layer_map)

    @classmethod
    def single_layer(cls, values, name: str = "params") -> "ParameterVector":
        values = np.asarray(values, dtype=np.float64).ravel()
        return cls(values, (LayerSegment(name, 0, values.size),))

    @classmethod
    def zeros_like(cls, other: "ParameterVector") -> "ParameterVector":
        return cls(np.zeros_like(other.values), other.layer_map)

    def __len__(self) -> int:
        return self.values.size

    def with_values(self, values) -> "ParameterVector":
        """Same layer map, new entries."""
        return ParameterVector(values, self.layer_map)

    def scale(self, factor: float) -> "ParameterVector":
        return self.with_values(self.values * factor)

    def __add__(self, other: "ParameterVector") -> "ParameterVector":
        _check_same_layout(self, other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ParameterVector") -> "ParameterVector":
        _check_same_layout(self, other)
        return self.with_values(self.values - other.values)

    def __neg__(self) -> "ParameterVector":
        return self.with_values(-self.values)

    def layer(self, name: str) -> np.ndarray:
        for segment in self.layer_map:
            if segment.name == name:
                return self.values[segment.start:segment.start + segment.length]
        raise KeyError(name)


VectorLike = Union[ParameterVector, np.ndarray, Sequence[float]]


def _as_array(v: VectorLike) -> np.ndarray:
    if isinstance(v, ParameterVector):
        return v.values
    return np.asarray(v, dtype=np.float64).ravel()


def _check_same_layout(a: ParameterVector, b: ParameterVector) -> None:
    if a.layer_map != b.layer_map:
        raise ContractViolation("vectors have different layer maps")


def l2_norm(a: VectorLike) -> float:
    """Euclidean norm."""
    return float(np.linalg.norm(_as_array(a)))


def cosine_similarity(a: VectorLike, b: VectorLike) -> float:
    """Cosine of the angle between a and b; 0 when either is (near) zero."""
    a, b = _as_array(a), _as_array(b)
    if a.size != b.size:
        raise ContractViolation(f"cosine_similarity length mismatch: {a.size} vs {b.size}")
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a < EPS_NORM or norm_b < EPS_NORM:
        return 0.0
    cos = float(np.dot(a, b) / (norm_a * norm_b))
    return min(1.0, max(-1.0, cos))


def weighted_sum(vectors: Sequence[ParameterVector], weights: Sequence[float]) -> ParameterVector:
    """Σ weights[i]·vectors[i], accumulated strictly left to right."""
    if len(vectors) == 0:
        raise ContractViolation("weighted_sum of an empty list")
    if len(vectors) != len(weights):
        raise ContractViolation(f"{len(vectors)} vectors but {len(weights)} weights")
    weights = [float(w) for w in weights]
    if not all(np.isfinite(weights)):
        raise ContractViolation("weighted_sum weights must be finite")

    layer_map = vectors[0].layer_map
    total = np.zeros(len(vectors[0]), dtype=np.float64)
    for vector, weight in zip(vectors, weights):
        if vector.layer_map != layer_map:
            raise ContractViolation("weighted_sum inputs have different layer maps")
        total += weight * vector.values
    return ParameterVector(total, layer_map)


def mean_vector(vectors: Sequence[ParameterVector]) -> ParameterVector:
    """Unweighted mean."""
    n = len(vectors)
    if n == 0:
        raise ContractViolation("mean_vector of an empty list")
    return weighted_sum(vectors, [1.0 / n] * n)


def last_layer_view(v: ParameterVector) -> np.ndarray:
    """Read-only view of the final layer_map segment."""
    if not v.layer_map:
        raise ContractViolation("last_layer_view needs a non-empty layer_map")
    segment = v.layer_map[-1]
    return v.values[segment.start:segment.start + segment.length]


def stack(vectors: Sequence[ParameterVector]) -> np.ndarray:
    """Rows = vectors; used by coordinate-wise aggregators."""
    if len(vectors) == 0:
        raise ContractViolation("cannot stack an empty list")
    layer_map = vectors[0].layer_map
    for vector in vectors[1:]:
        if vector.layer_map != layer_map:
            raise ContractViolation("stacked vectors have different layer maps")
    return np.vstack([v.values for v in vectors])
