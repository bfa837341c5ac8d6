import numpy as np
import pytest

from cloudfl.config.models import TopologyConfig
from cloudfl.economy import (
    CloudTopology,
    CostLedger,
    RoundCost,
    build_topology,
    client_cost,
    edge_leg_cost,
    expected_random_cost,
    full_participation_upper_bound,
    payload_gb,
    record_round,
    round_cost,
    select_clients,
    selection_scores,
)
from cloudfl.errors import ConfigurationError, ContractViolation


def _topology(k=3, per_cloud=4, **kwargs):
    return CloudTopology(num_clouds=k, client_cloud=tuple(c for c in range(k) for _ in range(per_cloud)),
                         c_intra=0.01, c_cross=0.09, **kwargs)


def test_payload_in_gb():
    assert payload_gb(250_000_000) == pytest.approx(1.0)
    assert payload_gb(1000, bytes_per_param=8) == pytest.approx(8e-6)


def test_topology_validation():
    with pytest.raises(ConfigurationError):
        CloudTopology(num_clouds=2, client_cloud=(0, 2), c_intra=0.01, c_cross=0.09)
    with pytest.raises(ConfigurationError):
        CloudTopology(num_clouds=2, client_cloud=(0, 1), c_intra=0.09, c_cross=0.01)
    with pytest.raises(ConfigurationError):
        CloudTopology(num_clouds=0, client_cloud=(), c_intra=0.01, c_cross=0.09)
    with pytest.raises(ConfigurationError):
        CloudTopology(num_clouds=2, client_cloud=(0, 1), c_intra=0.01, c_cross=0.09, client_region=(0,))


def test_build_topology_places_remote_clients_in_the_next_cloud():
    topology = build_topology(TopologyConfig(num_clouds=3, clients_per_cloud=4, remote_fraction=0.5))
    assert topology.client_cloud == (0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2)
    assert topology.client_region == (0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 0, 0)
    assert topology.aggregator_cloud == (0, 1, 2)
    assert topology.cloud_sizes() == [4, 4, 4]


def test_single_cloud_has_no_remote_clients():
    topology = build_topology(TopologyConfig(num_clouds=1, clients_per_cloud=4, remote_fraction=0.5))
    assert topology.client_region == (0, 0, 0, 0)


def test_leg_prices():
    topology = _topology(global_home=0)
    assert all(client_cost(i, topology) == 0.01 for i in range(topology.num_clients))
    assert edge_leg_cost(0, topology) == 0.01
    assert edge_leg_cost(1, topology) == edge_leg_cost(2, topology) == 0.09

    external = _topology()
    assert all(edge_leg_cost(k, external) == 0.09 for k in range(3))

    flat = CloudTopology(num_clouds=2, client_cloud=(0, 1), c_intra=0.05, c_cross=0.05, global_home=1)
    assert client_cost(0, flat) == edge_leg_cost(0, flat) == edge_leg_cost(1, flat) == 0.05


def test_remote_clients_pay_cross_cloud():
    topology = _topology(k=2, per_cloud=2, client_region=(0, 1, 1, 1))
    assert client_cost(0, topology) == 0.01
    assert client_cost(1, topology) == 0.09
    assert client_cost(2, topology) == 0.01


def test_round_cost_examples():
    topology = _topology(global_home=0)
    assert round_cost([], 10.0, topology) == RoundCost(0.0, 0.0, 0.0)
    cost = round_cost([0], 10.0, topology)
    assert cost.total == pytest.approx(0.2)
    assert cost.intra == pytest.approx(0.2) and cost.cross == 0.0
    with pytest.raises(ContractViolation):
        round_cost([0], 0.0, topology)


def test_full_participation_matches_closed_form():
    topology = _topology()
    d = 3.5
    cost = round_cost(range(topology.num_clients), d, topology)
    assert cost.total == pytest.approx(full_participation_upper_bound(d, topology))
    assert cost.total == pytest.approx(12 * d * 0.01 + 3 * d * 0.09)


def test_round_cost_is_additive_in_client_legs():
    topology = _topology(client_region=(0, 1, 0, 0, 1, 2, 1, 1, 2, 2, 0, 2))
    a, b = [0, 1, 5], [2, 6, 9]
    both = round_cost(a + b, 1.0, topology, charge_edge_legs=False)
    assert both.total == pytest.approx(round_cost(a, 1.0, topology, charge_edge_legs=False).total
                                       + round_cost(b, 1.0, topology, charge_edge_legs=False).total)
    edge_only = round_cost(a + b, 1.0, topology).total - both.total
    assert edge_only == pytest.approx(3 * 0.09)


def test_breakdown_sums_to_total():
    topology = _topology(global_home=1, client_region=(0, 1, 0, 0, 1, 2, 1, 1, 2, 2, 0, 2))
    cost = round_cost(range(12), 2.0, topology)
    assert cost.intra + cost.cross == pytest.approx(cost.total)
    assert cost.cross > 0 and cost.intra > 0


def test_downlink_doubles_every_leg():
    topology = _topology()
    up = round_cost([0, 5], 1.0, topology)
    both = round_cost([0, 5], 1.0, topology, charge_downlink=True)
    assert both.total == pytest.approx(2 * up.total)


def test_flat_accounting_skips_edge_legs():
    topology = _topology(global_home=0)
    cost = round_cost([0, 4, 8], 1.0, topology, hierarchical=False)
    assert cost.total == pytest.approx(0.01 + 0.09 + 0.09)


def test_ledger():
    ledger = record_round(CostLedger(), RoundCost(1.0, 0.25, 0.75))
    assert ledger.cumulative == 1.0
    ledger = record_round(ledger, RoundCost(2.0, 2.0, 0.0))
    assert ledger.cumulative == 3.0
    assert ledger.per_round == [1.0, 2.0]
    assert all(intra + cross == total for (intra, cross), total in zip(ledger.breakdown, ledger.per_round))
    with pytest.raises(ContractViolation):
        record_round(ledger, RoundCost(-1.0, 0.0, -1.0))


def test_ledger_is_not_mutated():
    empty = CostLedger()
    record_round(empty, RoundCost(1.0, 1.0, 0.0))
    assert empty.cumulative == 0.0 and empty.per_round == []


def test_cost_aware_selection_prefers_cheap_clients():
    topology = CloudTopology(num_clouds=2, client_cloud=(0, 0, 0, 0), client_region=(0, 0, 1, 1),
                             c_intra=0.01, c_cross=0.09)
    assert select_clients([0.25] * 4, topology, 2, 1.0, seed=0) == (0, 1)


def test_reputation_can_outweigh_price():
    topology = CloudTopology(num_clouds=2, client_cloud=(0, 0, 0), client_region=(1, 0, 0),
                             c_intra=0.01, c_cross=0.09)
    np.testing.assert_allclose(selection_scores([0.9, 0.05, 0.05], [0.09, 0.01, 0.01], 1.0), [10.0, 5.0, 5.0])
    assert select_clients([0.9, 0.05, 0.05], topology, 1, 1.0, seed=0) == (0,)


def test_lambda_zero_ignores_price():
    topology = CloudTopology(num_clouds=2, client_cloud=(0, 0, 0, 0), client_region=(1, 1, 0, 0),
                             c_intra=0.01, c_cross=0.09)
    assert select_clients([0.4, 0.3, 0.2, 0.1], topology, 2, 0.0, seed=0) == (0, 1)


def test_free_clients_without_reputation_score_zero():
    scores = selection_scores([0.0, 0.5, 0.0], [0.0, 0.0, 0.01], 1.0)
    assert not np.any(np.isnan(scores))
    np.testing.assert_array_equal(scores, [0.0, np.inf, 0.0])

    free = CloudTopology(num_clouds=1, client_cloud=(0, 0, 0, 0), c_intra=0.0, c_cross=0.09)
    assert select_clients([0.0, 0.4, 0.0, 0.6], free, 2, 1.0, seed=0) == (1, 3)
    assert select_clients([0.0, 0.4, 0.0, 0.6], free, 3, 1.0, seed=0) == (0, 1, 3)


def test_selection_ties_go_to_lower_ids():
    assert select_clients([0.25] * 4, _topology(k=1), 3, 0.3, seed=0) == (0, 1, 2)


def test_selection_is_scale_invariant_in_reputation():
    rng = np.random.default_rng(0)
    topology = _topology(client_region=tuple(rng.integers(0, 3, size=12)))
    for _ in range(20):
        r_hat = rng.dirichlet(np.ones(12))
        for lam in (0.0, 0.3, 1.0, 2.0):
            assert (select_clients(r_hat, topology, 5, lam, seed=0)
                    == select_clients(r_hat * 7.5, topology, 5, lam, seed=0))


def test_selection_cost_does_not_grow_with_lambda():
    rng = np.random.default_rng(1)
    topology = _topology(k=2, per_cloud=6, client_region=tuple(rng.integers(0, 2, size=12)))
    for _ in range(30):
        r_hat = rng.dirichlet(np.ones(12))
        costs = [round_cost(select_clients(r_hat, topology, 5, lam, seed=0), 1.0, topology, charge_edge_legs=False).total
                 for lam in (0.0, 0.3, 1.0, 2.0)]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(costs, costs[1:]))


def test_random_selection():
    topology = _topology()
    first = select_clients([1 / 12] * 12, topology, 4, 1.0, seed=3, cost_aware=False)
    assert len(first) == 4 and len(set(first)) == 4
    assert first == select_clients([1 / 12] * 12, topology, 4, 1.0, seed=3, cost_aware=False)
    in_cloud = select_clients([1 / 12] * 12, topology, 2, 1.0, seed=3, candidates=topology.clients_in(1),
                              cost_aware=False)
    assert set(in_cloud) <= set(topology.clients_in(1))


def test_selection_errors():
    topology = _topology(k=1)
    with pytest.raises(ConfigurationError):
        select_clients([0.25] * 4, topology, 5, 1.0, seed=0)
    with pytest.raises(ConfigurationError):
        select_clients([0.25] * 4, topology, 0, 1.0, seed=0)
    with pytest.raises(ConfigurationError):
        select_clients([0.25] * 4, topology, 2, -1.0, seed=0)


def test_expected_random_cost_matches_linearity():
    topology = _topology(k=2, per_cloud=5, client_region=(0, 0, 1, 1, 1, 1, 1, 0, 0, 0))
    for m in range(1, 6):
        members = topology.clients_in(0)
        by_linearity = m / len(members) * sum(client_cost(i, topology) for i in members)
        assert expected_random_cost(topology, 0, m, 1.0) == pytest.approx(by_linearity)
