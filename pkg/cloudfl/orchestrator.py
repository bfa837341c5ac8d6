"""
Round engine: selection, local training, attacks, reputation, edge and global
aggregation, cost accounting and evaluation.

Every random draw is keyed off the experiment seed with derive_seed, so the
result of a round never depends on thread scheduling or on which other
strategies were run before it.
"""
import logging
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from cloudfl.aggregation import (
    AggregationContext,
    aggregate,
    aggregate_crosscloud,
    aggregate_fedavg,
    combine_by_counts,
    trust_aggregate,
)
from cloudfl.attacks import UPDATE_ATTACKS, assign_malicious, flip_labels, perturb_update
from cloudfl.config.models import AblationFlags, AttackKind, ExperimentConfig, ModelSpec, Strategy
from cloudfl.data import Dataset, carve_reference, dirichlet_partition, generate_synthetic, load_columnar, pooled, train_test_split
from cloudfl.economy import (
    CloudTopology,
    CostLedger,
    RoundCost,
    build_topology,
    payload_gb,
    record_round,
    round_cost,
    select_clients,
)
from cloudfl.errors import ConfigurationError, UndefinedCorrelationError
from cloudfl.linalg import ParameterVector, l2_norm
from cloudfl.model import evaluate, init_parameters, local_train, reference_gradient
from cloudfl.reputation import (
    ReputationState,
    contribution_scores,
    exact_shapley,
    monte_carlo_shapley,
    record_scores,
    shapley_correlation,
)
from cloudfl.seeding import derive_seed
from cloudfl.sweep_queue import SweepQueue, SweepWorker

logger = logging.getLogger(__name__)

LOG_EVERY = 10


# --- Setup ---

@dataclass(frozen=True, eq=False)
class Federation:
    """Everything fixed before round 1: data placement, topology and attackers."""

    config: ExperimentConfig
    topology: CloudTopology
    spec: ModelSpec
    client_shards: Tuple[Dataset, ...]
    reference_shards: Tuple[Dataset, ...]
    test_set: Dataset
    malicious: FrozenSet[int]
    empty_clients: Tuple[int, ...] = ()

    @property
    def num_clients(self) -> int:
        return self.topology.num_clients

    @property
    def model_size(self) -> int:
        return self.spec.num_parameters

    @property
    def payload_gb(self) -> float:
        return payload_gb(self.model_size, self.config.topology.bytes_per_param)

    def sample_count(self, client: int) -> int:
        return len(self.client_shards[client])


def attack_seed(config: ExperimentConfig) -> int:
    """Root of every attack-related draw; attack.seed pins it independently of the experiment seed."""
    if config.attack.seed is not None:
        return config.attack.seed
    return derive_seed(config.seed, "attack")


def _load_dataset(config: ExperimentConfig) -> Dataset:
    data_cfg = config.data
    if data_cfg.path:
        return load_columnar(data_cfg.path)
    return generate_synthetic(
        data_cfg.num_classes,
        data_cfg.samples_per_class,
        data_cfg.feature_dim,
        derive_seed(config.seed, "data"),
        cluster_std=data_cfg.cluster_std,
        center_distance=data_cfg.center_distance,
    )


def build_federation(config: ExperimentConfig) -> Federation:
    """Generate/load data, split off the test set, partition, carve references, place attackers."""
    data = _load_dataset(config)
    train, test = train_test_split(data, config.data.test_fraction, derive_seed(config.seed, "split"))
    topology = build_topology(config.topology)

    partition = dirichlet_partition(train, topology.num_clients, config.alpha, derive_seed(config.seed, "partition"))
    split = carve_reference(partition.shards, topology, config.reference_size, derive_seed(config.seed, "reference"))

    attack = config.attack
    malicious: FrozenSet[int] = frozenset()
    if attack.kind != AttackKind.NONE:
        malicious = assign_malicious(topology.num_clients, attack.malicious_fraction, topology,
                                     derive_seed(attack_seed(config), "assign"))

    shards = list(split.client_shards)
    if attack.kind == AttackKind.LABEL_FLIP:
        flip_seed = derive_seed(config.seed, "label_flip")
        for i in sorted(malicious):
            shards[i] = flip_labels(shards[i], data.num_classes, flip_seed)

    federation = Federation(
        config=config,
        topology=topology,
        spec=config.model_spec(data.feature_dim, data.num_classes),
        client_shards=tuple(shards),
        reference_shards=split.reference_shards,
        test_set=test,
        malicious=malicious,
        empty_clients=tuple(i for i, s in enumerate(shards) if len(s) == 0),
    )
    logger.info(
        f"[Orchestrator] Federation '{config.name}': K={topology.num_clouds}, N={topology.num_clients}, "
        f"d={federation.model_size}, {len(train)} train / {len(test)} test samples, "
        f"{len(malicious)} malicious ({attack.kind.value})"
    )
    return federation


# --- State and metrics ---

@dataclass(frozen=True, eq=False)
class SimulationState:
    round: int
    weights: ParameterVector
    reputation: ReputationState
    ledger: CostLedger
    sigma: Optional[float] = None


@dataclass(frozen=True, eq=False)
class RoundMetrics:
    round: int
    accuracy: float
    loss: float
    selected: Tuple[int, ...]
    trust_scores: np.ndarray
    r_hat: np.ndarray
    beta: Tuple[float, ...]
    cost: RoundCost
    cost_cumulative: float
    reference_fallback_clouds: Tuple[int, ...] = ()

    @property
    def selected_count(self) -> int:
        return len(self.selected)


def initial_state(federation: Federation) -> SimulationState:
    """w0 from the seed, r_hat = 1/N, empty ledger."""
    config = federation.config
    return SimulationState(
        round=0,
        weights=init_parameters(federation.spec, derive_seed(config.seed, "init")),
        reputation=ReputationState.initial(federation.num_clients, config.gamma),
        ledger=CostLedger(),
        sigma=config.attack.sigma,
    )


# --- One round ---

def _uses_trust(config: ExperimentConfig) -> bool:
    return config.strategy == Strategy.COST_TRUSTFL


def _select(federation: Federation, r_hat: np.ndarray, t: int) -> List[Tuple[int, ...]]:
    """Participants per cloud (cost-aware only for cost_trustfl with the flag on)."""
    config = federation.config
    cost_aware = _uses_trust(config) and config.ablation.cost_aware_selection
    return [
        select_clients(
            r_hat,
            federation.topology,
            config.participants_per_cloud,
            config.lam,
            derive_seed(config.seed, "select", t, k),
            candidates=federation.topology.clients_in(k),
            cost_aware=cost_aware,
        )
        for k in range(federation.topology.num_clouds)
    ]


def client_updates(
    federation: Federation,
    weights: ParameterVector,
    clients: Sequence[int],
    t: int,
    sigma: Optional[float],
    pool: Optional[Executor] = None,
) -> Tuple[Dict[int, ParameterVector], Optional[float]]:
    """Local training for `clients`, then update-level attacks. Returns (updates, sigma used)."""
    config = federation.config

    def train(i: int) -> ParameterVector:
        return local_train(weights, federation.client_shards[i], config.train, derive_seed(config.seed, "train", i, t))

    clients = list(clients)
    trained = list(pool.map(train, clients)) if pool is not None else [train(i) for i in clients]
    updates = dict(zip(clients, trained))

    attack = config.attack
    attackers = [i for i in clients if i in federation.malicious]
    if attack.kind not in UPDATE_ATTACKS or not attackers:
        return updates, sigma

    if attack.kind == AttackKind.GAUSSIAN and sigma is None:
        benign = [i for i in clients if i not in federation.malicious] or clients
        sigma = float(np.mean([l2_norm(updates[i]) for i in benign]))
        logger.info(f"[Orchestrator] Gaussian attack sigma fixed at {sigma:.6g} (mean benign update norm, round {t})")

    for i in attackers:
        updates[i] = perturb_update(updates[i], attack, derive_seed(attack_seed(config), "perturb", i, t), sigma=sigma)
    return updates, sigma


def _reference(federation: Federation, weights: ParameterVector, cloud: Optional[int], t: int) -> ParameterVector:
    """Reference update of one cloud, or of the pooled reference data when cloud is None."""
    config = federation.config
    if cloud is None:
        shard = pooled(federation.reference_shards, federation.spec.num_classes, federation.spec.feature_dim)
        cloud = 0
    else:
        shard = federation.reference_shards[cloud]
    return reference_gradient(weights, shard, config.train, derive_seed(config.seed, "reference", cloud, t))


def _cloud_shares(topology: CloudTopology, clients: Sequence[int], weights: Sequence[float]) -> Tuple[float, ...]:
    shares = np.zeros(topology.num_clouds)
    for i, w in zip(clients, weights):
        shares[topology.client_cloud[i]] += w
    total = shares.sum()
    return tuple(float(s) for s in (shares / total if total > 0 else shares))


def _trust_round(federation, state, groups, updates, t):
    """cost_trustfl: reputation update, trust aggregation per cloud (or flat), trust beta."""
    config = federation.config
    flags: AblationFlags = config.ablation
    n = federation.num_clients
    # flat mode treats all participants as one block scored against the pooled reference
    if flags.hierarchical:
        blocks = [list(members) for members in groups]
    else:
        blocks = [sorted(i for members in groups for i in members)]

    phi_blocks = [contribution_scores([updates[i] for i in members]) for members in blocks]
    reputation = record_scores(state.reputation, blocks, phi_blocks)

    scores = np.zeros(n)
    fallbacks: List[int] = []
    block_updates, refs = [], []
    for b, members in enumerate(blocks):
        ref = _reference(federation, state.weights, b if flags.hierarchical else None, t)
        r_used = reputation.r_hat[members] if flags.shapley_weighting else np.full(len(members), 1.0 / n)
        result = trust_aggregate(
            [updates[i] for i in members], ref, r_used,
            normalize_updates=flags.trust_normalization, full_vector=config.full_vector_trust,
        )
        scores[members] = result.scores
        if result.used_reference:
            fallbacks.append(b)
        block_updates.append(result.update)
        refs.append(ref)

    if not flags.hierarchical:
        beta = _cloud_shares(federation.topology, blocks[0], scores[blocks[0]])
        return block_updates[0], beta, scores, reputation, tuple(fallbacks)

    global_update, beta = aggregate_crosscloud(block_updates, refs, federation.topology.cloud_sizes())
    return global_update, tuple(float(b) for b in beta), scores, reputation, tuple(fallbacks)


def _baseline_round(federation, state, groups, updates, t):
    """Baselines: edge aggregation by strategy, clouds combined by participant sample counts."""
    config = federation.config
    strategy = config.strategy

    def context(members, ref):
        return AggregationContext(
            sample_counts=[federation.sample_count(i) for i in members],
            ref_update=ref,
            krum_f=config.krum_f,
            trim_fraction=config.trim_fraction,
            full_vector_trust=config.full_vector_trust,
            normalize_updates=config.ablation.trust_normalization,
        )

    def edge(members, cloud):
        counts = [federation.sample_count(i) for i in members]
        if strategy == Strategy.FEDAVG and sum(counts) == 0:
            return ParameterVector.zeros_like(state.weights)
        ref = _reference(federation, state.weights, cloud, t) if strategy == Strategy.FLTRUST else None
        return aggregate(strategy, [updates[i] for i in members], context(members, ref))

    if not config.ablation.hierarchical:
        everyone = sorted(i for members in groups for i in members)
        counts = [federation.sample_count(i) for i in everyone]
        return edge(everyone, None), _cloud_shares(federation.topology, everyone, counts)

    cloud_updates = [edge(members, k) for k, members in enumerate(groups)]
    counts = [sum(federation.sample_count(i) for i in members) for members in groups]
    global_update, beta = combine_by_counts(cloud_updates, counts)
    return global_update, tuple(float(b) for b in beta)


def run_round(
    federation: Federation,
    state: SimulationState,
    pool: Optional[Executor] = None,
) -> Tuple[SimulationState, RoundMetrics]:
    """One global round; returns the committed state and its metrics."""
    config = federation.config
    t = state.round + 1

    groups = _select(federation, state.reputation.r_hat, t)
    selected = tuple(sorted(i for members in groups for i in members))
    updates, sigma = client_updates(federation, state.weights, selected, t, state.sigma, pool)

    reputation = state.reputation
    scores = np.zeros(federation.num_clients)
    fallbacks: Tuple[int, ...] = ()
    if _uses_trust(config):
        global_update, beta, scores, reputation, fallbacks = _trust_round(federation, state, groups, updates, t)
    else:
        global_update, beta = _baseline_round(federation, state, groups, updates, t)

    weights = state.weights - global_update.scale(config.eta)

    cost = round_cost(
        selected,
        federation.payload_gb,
        federation.topology,
        hierarchical=config.ablation.hierarchical,
        charge_edge_legs=config.charge_edge_legs,
        charge_downlink=config.charge_downlink,
    )
    ledger = record_round(state.ledger, cost)
    loss, accuracy = evaluate(weights, federation.test_set)

    metrics = RoundMetrics(
        round=t,
        accuracy=accuracy,
        loss=loss,
        selected=selected,
        trust_scores=scores,
        r_hat=reputation.r_hat,
        beta=beta,
        cost=cost,
        cost_cumulative=ledger.cumulative,
        reference_fallback_clouds=fallbacks,
    )
    new_state = SimulationState(round=t, weights=weights, reputation=reputation, ledger=ledger, sigma=sigma)
    return new_state, metrics


# --- Whole experiments ---

def run_experiment(
    config: ExperimentConfig,
    federation: Optional[Federation] = None,
    on_round: Optional[Callable[[RoundMetrics], None]] = None,
) -> List[RoundMetrics]:
    """T rounds from the initial state; one RoundMetrics per round."""
    federation = federation or build_federation(config)
    state = initial_state(federation)
    history: List[RoundMetrics] = []

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for _ in range(config.rounds):
            state, metrics = run_round(federation, state, pool)
            history.append(metrics)
            if on_round is not None:
                on_round(metrics)
            if metrics.round % LOG_EVERY == 0 or metrics.round == config.rounds:
                logger.info(
                    f"[Orchestrator] {config.strategy.value} round {metrics.round}/{config.rounds}: "
                    f"acc={metrics.accuracy:.4f} loss={metrics.loss:.4f} cost_cum={metrics.cost_cumulative:.6g}"
                )
    finally:
        if pool is not None:
            pool.shutdown()
    return history


def selection_cost_baseline(config: ExperimentConfig, federation: Optional[Federation] = None) -> float:
    """
    Cumulative cost of random selection with the same m per cloud over T rounds.

    Only selection is replayed (random selection never reads reputation), so no
    training happens here. Used as the denominator of every relative cost.
    """
    topology = federation.topology if federation is not None else build_topology(config.topology)
    if federation is not None:
        gb = federation.payload_gb
    else:
        data_cfg = config.data
        if data_cfg.path:
            data = load_columnar(data_cfg.path)
            spec = config.model_spec(data.feature_dim, data.num_classes)
        else:
            spec = config.model_spec(data_cfg.feature_dim, data_cfg.num_classes)
        gb = payload_gb(spec.num_parameters, config.topology.bytes_per_param)

    uniform = np.full(topology.num_clients, 1.0 / topology.num_clients)
    ledger = CostLedger()
    for t in range(1, config.rounds + 1):
        selected = []
        for k in range(topology.num_clouds):
            selected.extend(select_clients(
                uniform, topology, config.participants_per_cloud, config.lam,
                derive_seed(config.seed, "select", t, k),
                candidates=topology.clients_in(k), cost_aware=False,
            ))
        ledger = record_round(ledger, round_cost(
            selected, gb, topology,
            hierarchical=True,
            charge_edge_legs=config.charge_edge_legs,
            charge_downlink=config.charge_downlink,
        ))
    return ledger.cumulative


@dataclass(frozen=True)
class RunOutcome:
    """Final numbers of one finished experiment."""

    label: str
    accuracy: float
    loss: float
    cumulative_cost: float
    relative_cost: float


def summarize_run(label: str, config: ExperimentConfig, history: Sequence[RoundMetrics],
                  federation: Optional[Federation] = None) -> RunOutcome:
    last = history[-1]
    baseline = selection_cost_baseline(config, federation)
    relative = last.cost_cumulative / baseline if baseline > 0 else float("nan")
    return RunOutcome(label, last.accuracy, last.loss, last.cost_cumulative, relative)


def run_outcome(label: str, config: ExperimentConfig) -> RunOutcome:
    """Build, run and summarize one configuration."""
    federation = build_federation(config)
    return summarize_run(label, config, run_experiment(config, federation), federation)


def _run_jobs(labelled: Sequence[Tuple[str, ExperimentConfig]], jobs: int) -> List[RunOutcome]:
    queue = SweepQueue()
    for label, config in labelled:
        queue.add_job(label, config)
    SweepWorker(run_outcome, jobs=jobs).run(queue)
    return queue.results_in_order()


@dataclass(frozen=True)
class ComparisonTable:
    """Strategy x attack grid of final accuracies plus cost columns."""

    strategies: Tuple[str, ...]
    attacks: Tuple[str, ...]
    cells: Dict[Tuple[str, str], RunOutcome] = field(default_factory=dict)

    def accuracy(self, strategy: str, attack: str) -> float:
        return self.cells[(strategy, attack)].accuracy

    def relative_cost(self, strategy: str, attack: str) -> float:
        return self.cells[(strategy, attack)].relative_cost

    def shape(self) -> Tuple[int, int]:
        return len(self.strategies), len(self.attacks)


def _names(values, enum) -> Tuple[str, ...]:
    names = []
    for value in values:
        try:
            names.append(enum(value).value)
        except ValueError as e:
            raise ConfigurationError(f"unknown {enum.__name__} '{value}'") from e
    return tuple(names)


def run_comparison(
    config: ExperimentConfig,
    strategies: Sequence[str],
    attacks: Optional[Sequence[str]] = None,
    jobs: int = 1,
) -> ComparisonTable:
    """Same seed, data and attacker placement for every (strategy, attack) cell."""
    strategies = _names(strategies, Strategy)
    attacks = _names(attacks or [config.attack.kind.value], AttackKind)
    grid = [(s, a) for s in strategies for a in attacks]
    labelled = [(f"{s}/{a}", config.with_overrides(**{"strategy": s, "attack.kind": a})) for s, a in grid]
    cells = dict(zip(grid, _run_jobs(labelled, jobs)))
    return ComparisonTable(strategies, attacks, cells)


ABLATION_ROWS: Tuple[Tuple[str, Dict[str, bool]], ...] = (
    ("full", {}),
    ("w/o shapley weighting", {"shapley_weighting": False}),
    ("w/o cost-aware selection", {"cost_aware_selection": False}),
    ("w/o hierarchical", {"hierarchical": False}),
    ("w/o trust normalization", {"trust_normalization": False}),
)


def run_ablation(config: ExperimentConfig, jobs: int = 1) -> List[RunOutcome]:
    """The full pipeline plus one row per knocked-out component."""
    labelled = []
    for label, knocked_out in ABLATION_ROWS:
        overrides: Dict[str, Any] = {"strategy": Strategy.COST_TRUSTFL.value}
        overrides.update({f"ablation.{flag}": value for flag, value in knocked_out.items()})
        labelled.append((label, config.with_overrides(**overrides)))
    return _run_jobs(labelled, jobs)


SWEEP_PARAMS = {
    "lambda": "lambda",
    "lam": "lambda",
    "malicious_fraction": "attack.malicious_fraction",
    "malicious_frac": "attack.malicious_fraction",
    "alpha": "alpha",
}


def run_sweep(config: ExperimentConfig, param: str, values: Sequence[float], jobs: int = 1) -> List[RunOutcome]:
    """One run per value of lambda, malicious_fraction or alpha, in value order."""
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"cannot sweep '{param}' (expected one of: lambda, malicious_fraction, alpha)")
    key = SWEEP_PARAMS[param]
    labelled = [(f"{param}={value}", config.with_overrides(**{key: value})) for value in values]
    return _run_jobs(labelled, jobs)


# --- Shapley analysis ---

def coalition_accuracy_game(
    weights: ParameterVector,
    updates: Sequence[ParameterVector],
    sample_counts: Sequence[int],
    eta: float,
    validation: Dataset,
    value: str = "accuracy",
) -> Callable[[FrozenSet[int]], float]:
    """
    v(S) = validation accuracy of w - eta * FedAvg(updates of S); v(empty) = accuracy of w.

    value="neg_loss" scores coalitions by negative validation loss instead.
    """
    if value not in ("accuracy", "neg_loss"):
        raise ConfigurationError(f"unknown coalition value '{value}'")

    def score(w: ParameterVector) -> float:
        loss, acc = evaluate(w, validation)
        return acc if value == "accuracy" else -loss

    base = score(weights)

    def v(coalition: FrozenSet[int]) -> float:
        members = sorted(coalition)
        if not members or sum(sample_counts[i] for i in members) == 0:
            return base
        step = aggregate_fedavg([updates[i] for i in members], [sample_counts[i] for i in members])
        return score(weights - step.scale(eta))

    return v


@dataclass(frozen=True, eq=False)
class ShapleyReport:
    probe_round: int
    clients: Tuple[int, ...]
    malicious: Tuple[int, ...]
    phi: np.ndarray
    exact: np.ndarray
    monte_carlo: np.ndarray
    corr_phi_exact: float
    corr_mc_exact: float
    max_abs_error_mc: float
    timings: Dict[str, float]


def _safe_correlation(a, b, what: str) -> float:
    try:
        return shapley_correlation(a, b)
    except UndefinedCorrelationError:
        logger.warning(f"[Shapley] Correlation {what} is undefined (constant values)")
        return float("nan")


def validate_shapley(
    config: ExperimentConfig,
    num_clients: int = 8,
    probe_round: int = 10,
    num_permutations: int = 5000,
    value: str = "accuracy",
) -> ShapleyReport:
    """
    Compare contribution scores with exact and Monte Carlo Shapley values at a probe round.

    The federation is a single cloud of `num_clients` clients that all participate.
    Rounds before the probe run the configured strategy as usual.
    """
    if not 2 <= num_clients <= 12:
        raise ConfigurationError(f"Shapley validation supports 2..12 clients, got {num_clients}")
    if probe_round < 1:
        raise ConfigurationError("probe_round must be >= 1")

    probe_config = config.with_overrides(**{
        "rounds": probe_round,
        "topology.num_clouds": 1,
        "topology.clients_per_cloud": num_clients,
        "topology.global_home": None,
        "m_per_cloud": num_clients,
    })
    federation = build_federation(probe_config)
    state = initial_state(federation)
    for _ in range(probe_round - 1):
        state, _ = run_round(federation, state)

    clients = tuple(range(num_clients))
    updates_by_client, _ = client_updates(federation, state.weights, clients, probe_round, state.sigma)
    updates = [updates_by_client[i] for i in clients]
    counts = [federation.sample_count(i) for i in clients]
    game = coalition_accuracy_game(state.weights, updates, counts, probe_config.eta, federation.test_set, value)

    timings = {}
    started = time.perf_counter()
    phi = contribution_scores(updates)
    timings["gradient"] = time.perf_counter() - started

    started = time.perf_counter()
    exact = exact_shapley(game, num_clients, max_workers=probe_config.workers)
    timings["exact"] = time.perf_counter() - started

    started = time.perf_counter()
    mc = monte_carlo_shapley(game, num_clients, num_permutations, derive_seed(config.seed, "shapley_mc"),
                             max_workers=probe_config.workers)
    timings["monte_carlo"] = time.perf_counter() - started

    report = ShapleyReport(
        probe_round=probe_round,
        clients=clients,
        malicious=tuple(sorted(federation.malicious)),
        phi=phi,
        exact=exact,
        monte_carlo=mc,
        corr_phi_exact=_safe_correlation(phi, exact, "phi vs exact"),
        corr_mc_exact=_safe_correlation(mc, exact, "monte carlo vs exact"),
        max_abs_error_mc=float(np.max(np.abs(mc - exact))),
        timings=timings,
    )
    logger.info(
        f"[Shapley] N={num_clients} round {probe_round}: r(phi, exact)={report.corr_phi_exact:.4f}, "
        f"r(mc, exact)={report.corr_mc_exact:.4f}, max|mc - exact|={report.max_abs_error_mc:.4g}; "
        f"times gradient={timings['gradient']:.4f}s exact={timings['exact']:.4f}s mc={timings['monte_carlo']:.4f}s"
    )
    return report
