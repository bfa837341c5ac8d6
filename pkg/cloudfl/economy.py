"""
Multi-cloud cost model, cost ledger and cost-aware client selection.

Legs and prices:
- client -> edge aggregator: c_intra when the client's data is hosted in the
  aggregator's cloud, c_cross otherwise;
- edge aggregator -> global aggregator: c_intra for the global aggregator's
  home cloud, c_cross for every other cloud (and for all of them when the
  global aggregator lives outside every cloud).
"""
import itertools
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from cloudfl.config.models import TopologyConfig
from cloudfl.errors import ConfigurationError, ContractViolation

GB = 1e9


def payload_gb(num_parameters: int, bytes_per_param: int = 4) -> float:
    """Model payload of one leg, in GB."""
    return num_parameters * bytes_per_param / GB


@dataclass(frozen=True)
class CloudTopology:
    """Clouds, client placement and per-leg prices."""

    num_clouds: int
    client_cloud: Tuple[int, ...]
    c_intra: float
    c_cross: float
    client_region: Optional[Tuple[int, ...]] = None
    global_home: Optional[int] = None

    def __post_init__(self):
        if self.num_clouds < 1:
            raise ConfigurationError("topology needs at least one cloud")
        if any(not 0 <= k < self.num_clouds for k in self.client_cloud):
            raise ConfigurationError("every client must map to a valid cloud")
        if self.c_intra < 0 or self.c_cross < self.c_intra:
            raise ConfigurationError("prices must satisfy 0 <= c_intra <= c_cross")
        region = self.client_region if self.client_region is not None else self.client_cloud
        if len(region) != len(self.client_cloud) or any(not 0 <= k < self.num_clouds for k in region):
            raise ConfigurationError("client_region must give a valid cloud for every client")
        object.__setattr__(self, "client_cloud", tuple(int(k) for k in self.client_cloud))
        object.__setattr__(self, "client_region", tuple(int(k) for k in region))

    @property
    def num_clients(self) -> int:
        return len(self.client_cloud)

    @property
    def aggregator_cloud(self) -> Tuple[int, ...]:
        """Edge aggregator k always sits in cloud k."""
        return tuple(range(self.num_clouds))

    def clients_in(self, cloud: int) -> List[int]:
        return [i for i, k in enumerate(self.client_cloud) if k == cloud]

    def cloud_sizes(self) -> List[int]:
        return [len(self.clients_in(k)) for k in range(self.num_clouds)]


def build_topology(config: TopologyConfig) -> CloudTopology:
    """K equal clouds; the last ⌊remote_fraction·n_k⌋ clients of each are hosted in the next cloud."""
    n = config.clients_per_cloud
    remote = int(np.floor(config.remote_fraction * n + 1e-9)) if config.num_clouds > 1 else 0
    client_cloud, client_region = [], []
    for k in range(config.num_clouds):
        for j in range(n):
            client_cloud.append(k)
            client_region.append((k + 1) % config.num_clouds if j >= n - remote else k)
    return CloudTopology(
        num_clouds=config.num_clouds,
        client_cloud=tuple(client_cloud),
        c_intra=config.c_intra,
        c_cross=config.c_cross,
        client_region=tuple(client_region),
        global_home=config.global_home,
    )


# --- Per-leg prices ---

def _client_leg(client: int, topology: CloudTopology, *, flat: bool = False) -> Tuple[float, bool]:
    region = topology.client_region[client]
    target = topology.global_home if flat else topology.aggregator_cloud[topology.client_cloud[client]]
    return (topology.c_intra, True) if region == target else (topology.c_cross, False)


def _edge_leg(cloud: int, topology: CloudTopology) -> Tuple[float, bool]:
    return (topology.c_intra, True) if topology.global_home == cloud else (topology.c_cross, False)


def client_cost(client: int, topology: CloudTopology, *, flat: bool = False) -> float:
    """Price of one client's upload leg (to its edge aggregator, or straight to the global one when flat)."""
    return _client_leg(client, topology, flat=flat)[0]


def edge_leg_cost(cloud: int, topology: CloudTopology) -> float:
    """Price of cloud k's edge -> global leg."""
    return _edge_leg(cloud, topology)[0]


@dataclass(frozen=True)
class RoundCost:
    total: float
    intra: float
    cross: float


def round_cost(
    selected: Iterable[int],
    model_size_d: float,
    topology: CloudTopology,
    *,
    hierarchical: bool = True,
    charge_edge_legs: bool = True,
    charge_downlink: bool = False,
) -> RoundCost:
    """Cost of one round: d·Σ c_i over selected clients plus d·c_k per participating cloud."""
    if model_size_d <= 0:
        raise ContractViolation("model size must be positive")
    selected = sorted(set(selected))
    legs = [_client_leg(client, topology, flat=not hierarchical) for client in selected]
    if hierarchical and charge_edge_legs:
        legs += [_edge_leg(cloud, topology) for cloud in sorted({topology.client_cloud[i] for i in selected})]

    intra = cross = 0.0
    for price, is_intra in legs:
        if is_intra:
            intra += model_size_d * price
        else:
            cross += model_size_d * price

    if charge_downlink:
        intra, cross = 2 * intra, 2 * cross
    return RoundCost(total=intra + cross, intra=intra, cross=cross)


def full_participation_upper_bound(model_size_d: float, topology: CloudTopology) -> float:
    """Σ_k n_k·d·C_intra + K·d·C_cross."""
    return (sum(topology.cloud_sizes()) * model_size_d * topology.c_intra
            + topology.num_clouds * model_size_d * topology.c_cross)


# --- Ledger ---

@dataclass
class CostLedger:
    per_round: List[float] = field(default_factory=list)
    breakdown: List[Tuple[float, float]] = field(default_factory=list)
    cumulative: float = 0.0


def record_round(ledger: CostLedger, cost: RoundCost) -> CostLedger:
    """New ledger with one more round appended."""
    if cost.total < 0:
        raise ContractViolation("round cost must be non-negative")
    return CostLedger(
        per_round=[*ledger.per_round, cost.total],
        breakdown=[*ledger.breakdown, (cost.intra, cost.cross)],
        cumulative=ledger.cumulative + cost.total,
    )


# --- Selection ---

def selection_scores(r_hat: Sequence[float], costs: Sequence[float], lam: float) -> np.ndarray:
    """score_i = r_hat_i / c_i^lambda; a zero price scores +inf, or 0 when r_hat_i is also 0."""
    r_hat = np.asarray(r_hat, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if lam == 0:
        return r_hat.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = r_hat / np.power(costs, lam)
    return np.where(r_hat == 0, 0.0, scores)


def select_clients(
    r_hat: Sequence[float],
    topology: CloudTopology,
    m: int,
    lam: float,
    seed: int,
    *,
    candidates: Optional[Sequence[int]] = None,
    cost_aware: bool = True,
) -> Tuple[int, ...]:
    """
    Pick m clients among `candidates` (default: everyone).

    cost_aware: greedy top-m by r_hat / c^lambda, ties to the lower id (seed unused).
    otherwise: uniform sample of m drawn from `seed`.
    """
    pool = list(range(topology.num_clients)) if candidates is None else sorted(candidates)
    if not 1 <= m <= len(pool):
        raise ConfigurationError(f"cannot select m={m} clients from {len(pool)} candidates")
    if lam < 0:
        raise ConfigurationError("lambda must be >= 0")

    if not cost_aware:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(pool), size=m, replace=False)
        return tuple(sorted(pool[j] for j in chosen))

    costs = [client_cost(i, topology) for i in pool]
    scores = selection_scores([r_hat[i] for i in pool], costs, lam)
    order = sorted(range(len(pool)), key=lambda j: (-scores[j], pool[j]))
    return tuple(sorted(pool[j] for j in order[:m]))


def expected_random_cost(topology: CloudTopology, cloud: int, m: int, model_size_d: float) -> float:
    """Exact mean client-leg cost of a uniform m-subset of one cloud, by enumeration."""
    members = topology.clients_in(cloud)
    total, count = 0.0, 0
    for subset in itertools.combinations(members, m):
        total += model_size_d * sum(client_cost(i, topology) for i in subset)
        count += 1
    return total / count
