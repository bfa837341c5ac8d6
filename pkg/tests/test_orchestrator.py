import dataclasses

import numpy as np
import pytest

from cloudfl.aggregation import aggregate_fedavg
from cloudfl.errors import ConfigurationError
from cloudfl.linalg import l2_norm
from cloudfl.model import evaluate, sgd_epochs
from cloudfl.orchestrator import (
    ABLATION_ROWS,
    build_federation,
    client_updates,
    coalition_accuracy_game,
    initial_state,
    run_ablation,
    run_comparison,
    run_experiment,
    run_round,
    run_sweep,
    selection_cost_baseline,
    summarize_run,
    validate_shapley,
)
from cloudfl.reputation import contribution_scores, exact_shapley
from cloudfl.seeding import derive_seed
from tests.conftest import small_config


def _rounds(config, count=None):
    federation = build_federation(config)
    state = initial_state(federation)
    states, metrics = [], []
    for _ in range(count or config.rounds):
        state, m = run_round(federation, state)
        states.append(state)
        metrics.append(m)
    return federation, states, metrics


def _same_metrics(a, b):
    assert a.round == b.round and a.selected == b.selected and a.beta == b.beta
    assert a.accuracy == b.accuracy and a.loss == b.loss
    assert a.cost == b.cost and a.cost_cumulative == b.cost_cumulative
    np.testing.assert_array_equal(a.r_hat, b.r_hat)
    np.testing.assert_array_equal(a.trust_scores, b.trust_scores)


# --- Setup ---

def test_build_federation(config):
    federation = build_federation(config)
    assert federation.num_clients == 8
    assert len(federation.client_shards) == 8
    assert [len(r) for r in federation.reference_shards] == [10, 10]
    assert len(federation.test_set) == 60
    assert sum(len(s) for s in federation.client_shards) == 240 - 20
    assert federation.malicious == frozenset()
    assert federation.model_size == 4 * 4 + 4 + 4 * 3 + 3


def test_attackers_are_placed_from_the_seed():
    config = small_config(**{"attack.kind": "sign_flip", "attack.malicious_fraction": 0.25})
    federation = build_federation(config)
    assert len(federation.malicious) == 2
    assert build_federation(config).malicious == federation.malicious


def test_attack_seed_pins_the_malicious_set():
    overrides = {"attack.kind": "sign_flip", "attack.malicious_fraction": 0.25, "attack.seed": 5}
    a = build_federation(small_config(seed=1, **overrides))
    b = build_federation(small_config(seed=2, **overrides))
    assert a.malicious == b.malicious


def test_label_flip_rewrites_only_malicious_shards():
    clean = build_federation(small_config())
    flipped = build_federation(small_config(**{"attack.kind": "label_flip", "attack.malicious_fraction": 0.25}))
    for i in range(clean.num_clients):
        np.testing.assert_array_equal(flipped.client_shards[i].features, clean.client_shards[i].features)
        if i in flipped.malicious:
            assert np.all(flipped.client_shards[i].labels != clean.client_shards[i].labels)
        else:
            np.testing.assert_array_equal(flipped.client_shards[i].labels, clean.client_shards[i].labels)


# --- Rounds ---

def test_single_client_round_applies_its_local_model():
    config = small_config(**{
        "strategy": "fedavg", "rounds": 1, "lambda": 0.0, "eta": 1.0,
        "topology.num_clouds": 1, "topology.clients_per_cloud": 1,
    })
    federation, states, _ = _rounds(config)
    w0 = initial_state(federation).weights
    w_local, _ = sgd_epochs(w0, federation.client_shards[0], config.train, derive_seed(config.seed, "train", 0, 1))
    np.testing.assert_allclose(states[0].weights.values, w_local.values, rtol=0, atol=1e-12)


def test_runs_are_bitwise_reproducible(config):
    first = run_experiment(config)
    second = run_experiment(config)
    for a, b in zip(first, second):
        _same_metrics(a, b)


def test_worker_threads_do_not_change_results(config):
    serial = run_experiment(config)
    threaded = run_experiment(config.with_overrides(workers=3))
    for a, b in zip(serial, threaded):
        _same_metrics(a, b)


def test_metrics_invariants():
    config = small_config(rounds=6, **{"attack.kind": "gaussian", "attack.malicious_fraction": 0.25})
    history = run_experiment(config)
    assert [m.round for m in history] == list(range(1, 7))
    cumulative = [m.cost_cumulative for m in history]
    assert all(b >= a for a, b in zip(cumulative, cumulative[1:]))
    assert cumulative[-1] == pytest.approx(sum(m.cost.total for m in history))
    federation = build_federation(config)
    m = config.participants_per_cloud
    for metrics in history:
        assert metrics.r_hat.sum() == pytest.approx(1.0, abs=1e-9)
        assert sum(metrics.beta) == pytest.approx(1.0, abs=1e-12)
        assert np.all(metrics.trust_scores >= 0)
        for k in range(2):
            in_cloud = [i for i in metrics.selected if federation.topology.client_cloud[i] == k]
            assert len(in_cloud) <= m
        assert 0.0 <= metrics.accuracy <= 1.0


def test_on_round_callback_sees_every_round(config):
    seen = []
    run_experiment(config, on_round=seen.append)
    assert [m.round for m in seen] == [1, 2, 3]


def test_fedavg_pipeline_equals_flat_fedavg():
    hierarchical = small_config(strategy="fedavg", rounds=4)
    flat = hierarchical.with_overrides(**{"ablation.hierarchical": False})
    _, states_h, metrics_h = _rounds(hierarchical)
    _, states_f, metrics_f = _rounds(flat)
    for a, b in zip(states_h, states_f):
        np.testing.assert_allclose(a.weights.values, b.weights.values, rtol=0, atol=1e-9)
    for a, b in zip(metrics_h, metrics_f):
        assert a.selected == b.selected
        np.testing.assert_allclose(a.beta, b.beta, atol=1e-12)


def test_single_cloud_flat_trust_equals_hierarchical():
    one_cloud = small_config(**{"topology.num_clouds": 1, "topology.clients_per_cloud": 6, "rounds": 4})
    flat = one_cloud.with_overrides(**{"ablation.hierarchical": False})
    _, states_h, metrics_h = _rounds(one_cloud)
    _, states_f, metrics_f = _rounds(flat)
    for a, b in zip(states_h, states_f):
        np.testing.assert_array_equal(a.weights.values, b.weights.values)
        np.testing.assert_array_equal(a.reputation.r_hat, b.reputation.r_hat)
    for a, b in zip(metrics_h, metrics_f):
        assert a.accuracy == b.accuracy and a.beta == b.beta == (1.0,)


def test_uniform_trust_pipeline_reduces_to_fedavg():
    config = small_config(rounds=10, alpha=1000.0, **{
        "topology.num_clouds": 1, "topology.clients_per_cloud": 4,
        "ablation.shapley_weighting": False, "ablation.trust_normalization": False,
        "train.batch_size": 1000,
    })
    federation = build_federation(config)
    # every client holds the same shard, so full-batch updates share one direction
    shard = max(federation.client_shards, key=len)
    federation = dataclasses.replace(federation, client_shards=(shard,) * federation.num_clients)

    state = initial_state(federation)
    for _ in range(config.rounds):
        new_state, metrics = run_round(federation, state)
        assert metrics.beta == (1.0,) and metrics.reference_fallback_clouds == ()
        chosen = metrics.trust_scores[list(metrics.selected)]
        np.testing.assert_allclose(chosen, chosen[0], rtol=1e-9)

        updates, _ = client_updates(federation, state.weights, metrics.selected, metrics.round, None)
        fedavg = aggregate_fedavg([updates[i] for i in metrics.selected],
                                  [federation.sample_count(i) for i in metrics.selected])
        expected = state.weights - fedavg.scale(config.eta)
        np.testing.assert_allclose(new_state.weights.values, expected.values, rtol=0, atol=1e-9)
        state = new_state


def test_baselines_do_not_touch_reputation():
    _, states, _ = _rounds(small_config(strategy="median"))
    np.testing.assert_array_equal(states[-1].reputation.r_hat, np.full(8, 1 / 8))


def test_trust_round_updates_reputation(config):
    _, states, metrics = _rounds(config)
    assert not np.allclose(states[-1].reputation.r_hat, 1 / 8)
    assert all(m.trust_scores[i] == 0 for m in metrics for i in range(8) if i not in m.selected)


def test_sign_flipped_attackers_lose_reputation():
    config = small_config(rounds=8, m_per_cloud=4, alpha=1000.0,
                          **{"attack.kind": "sign_flip", "attack.malicious_fraction": 0.125})
    federation, states, metrics = _rounds(config)
    r_hat = states[-1].reputation.r_hat
    bad = sorted(federation.malicious)
    good = [i for i in range(8) if i not in federation.malicious]
    assert max(r_hat[bad]) < min(r_hat[good])
    assert all(m.trust_scores[i] == 0 for m in metrics for i in bad)


def test_all_flags_off_still_selects_m_per_cloud():
    config = small_config(lam=0.0, **{f"ablation.{flag}": False for _, row in ABLATION_ROWS for flag in row})
    for metrics in run_experiment(config):
        assert metrics.selected_count == 2 * config.participants_per_cloud


def test_adaptive_gaussian_sigma_is_measured_once():
    config = small_config(m_per_cloud=4, **{"attack.kind": "gaussian", "attack.malicious_fraction": 0.25})
    federation = build_federation(config)
    state = initial_state(federation)
    assert state.sigma is None

    everyone = tuple(range(8))
    benign = [i for i in everyone if i not in federation.malicious]
    honest, _ = client_updates(federation, state.weights, everyone, 1, sigma=0.0)
    expected = float(np.mean([l2_norm(honest[i]) for i in benign]))

    state, _ = run_round(federation, state)
    assert state.sigma == pytest.approx(expected, rel=1e-12)
    sigma = state.sigma
    state, _ = run_round(federation, state)
    assert state.sigma == sigma


def test_explicit_sigma_is_kept():
    config = small_config(**{"attack.kind": "gaussian", "attack.malicious_fraction": 0.25, "attack.sigma": 0.5})
    _, states, _ = _rounds(config, 2)
    assert states[-1].sigma == 0.5


def test_krum_needs_enough_participants():
    with pytest.raises(ConfigurationError):
        run_experiment(small_config(strategy="krum"))
    assert len(run_experiment(small_config(strategy="krum", m_per_cloud=4))) == 3


def test_fedavg_learns_the_blob_task():
    config = small_config(strategy="fedavg", rounds=15, alpha=1000.0,
                          **{"train.local_epochs": 5, "train.learning_rate": 0.1})
    assert run_experiment(config)[-1].accuracy > 0.85


# --- Costs ---

def test_selection_baseline_matches_random_selection_run():
    config = small_config(**{"ablation.cost_aware_selection": False, "topology.remote_fraction": 0.5})
    federation = build_federation(config)
    history = run_experiment(config, federation)
    assert selection_cost_baseline(config, federation) == history[-1].cost_cumulative
    assert selection_cost_baseline(config) == selection_cost_baseline(config, federation)
    assert summarize_run("random", config, history, federation).relative_cost == 1.0


def test_cost_aware_selection_is_cheaper():
    config = small_config(lam=1.0, **{"topology.remote_fraction": 0.5})
    federation = build_federation(config)
    outcome = summarize_run("full", config, run_experiment(config, federation), federation)
    assert outcome.relative_cost < 1.0


# --- Multi-run drivers ---

def test_single_cell_comparison_matches_run(config):
    table = run_comparison(config, ["fedavg"], ["none"])
    assert table.shape() == (1, 1)
    direct = run_experiment(config.with_overrides(strategy="fedavg"))[-1]
    assert table.accuracy("fedavg", "none") == direct.accuracy


def test_comparison_grid_shape():
    config = small_config(m_per_cloud=4, **{"attack.malicious_fraction": 0.25})
    table = run_comparison(config, ["fedavg", "cost_trustfl"], ["none", "sign_flip", "scale"], jobs=2)
    assert table.shape() == (2, 3)
    assert set(table.cells) == {(s, a) for s in ("fedavg", "cost_trustfl") for a in ("none", "sign_flip", "scale")}


def test_comparison_rejects_unknown_names(config):
    with pytest.raises(ConfigurationError):
        run_comparison(config, ["bulyan"])
    with pytest.raises(ConfigurationError):
        run_comparison(config, ["fedavg"], ["backdoor"])


def test_ablation_rows():
    outcomes = run_ablation(small_config(**{"topology.remote_fraction": 0.5}))
    assert [o.label for o in outcomes] == [label for label, _ in ABLATION_ROWS]
    assert len(outcomes) == 5
    by_label = {o.label: o for o in outcomes}
    assert by_label["w/o cost-aware selection"].relative_cost == 1.0


def test_sweep():
    config = small_config()
    outcomes = run_sweep(config, "lambda", [0.0, 1.0], jobs=2)
    assert [o.label for o in outcomes] == ["lambda=0.0", "lambda=1.0"]
    single = run_sweep(config, "alpha", [config.alpha])[0]
    assert single.accuracy == run_experiment(config)[-1].accuracy
    with pytest.raises(ConfigurationError):
        run_sweep(config, "gamma", [0.5])


# --- Shapley analysis ---

def test_coalition_game(config):
    federation = build_federation(config)
    state = initial_state(federation)
    updates, _ = client_updates(federation, state.weights, range(3), 1, None)
    updates = [updates[i] for i in range(3)]
    counts = [federation.sample_count(i) for i in range(3)]
    v = coalition_accuracy_game(state.weights, updates, counts, 1.0, federation.test_set)
    assert v(frozenset()) == evaluate(state.weights, federation.test_set)[1]
    neg_loss = coalition_accuracy_game(state.weights, updates, counts, 1.0, federation.test_set, value="neg_loss")
    assert neg_loss(frozenset()) == -evaluate(state.weights, federation.test_set)[0]
    with pytest.raises(ConfigurationError):
        coalition_accuracy_game(state.weights, updates, counts, 1.0, federation.test_set, value="f1")


def test_symmetric_clients_share_value(config):
    federation = build_federation(config)
    state = initial_state(federation)
    updates, _ = client_updates(federation, state.weights, [0], 1, None)
    twins = [updates[0], updates[0]]
    v = coalition_accuracy_game(state.weights, twins, [5, 5], 1.0, federation.test_set, value="neg_loss")
    exact = exact_shapley(v, 2)
    assert exact[0] == pytest.approx(exact[1], abs=1e-12)
    phi = contribution_scores(twins)
    assert phi[0] == phi[1]


def test_validate_shapley_report(config):
    report = validate_shapley(config, num_clients=4, probe_round=2, num_permutations=200)
    assert report.clients == (0, 1, 2, 3)
    assert report.phi.shape == report.exact.shape == report.monte_carlo.shape == (4,)
    assert set(report.timings) == {"gradient", "exact", "monte_carlo"}
    assert report.monte_carlo.sum() == pytest.approx(report.exact.sum(), abs=1e-9)


def test_validate_shapley_limits(config):
    with pytest.raises(ConfigurationError):
        validate_shapley(config, num_clients=13)
    with pytest.raises(ConfigurationError):
        validate_shapley(config, num_clients=4, probe_round=0)
