import math

import numpy as np
import pytest

from cloudfl.config.models import ModelSpec, TrainConfig
from cloudfl.data import Dataset, carve_reference, dirichlet_partition, generate_synthetic
from cloudfl.economy import CloudTopology
from cloudfl.errors import ConfigurationError, ContractViolation
from cloudfl.linalg import ParameterVector, cosine_similarity, l2_norm, mean_vector
from cloudfl.model import (
    evaluate,
    forward_loss,
    gradient,
    init_parameters,
    layer_map_for,
    local_train,
    predict,
    reference_gradient,
    sgd_epochs,
    spec_of,
)

MLP = ModelSpec(feature_dim=4, hidden_dim=5, num_classes=3)
LINEAR = ModelSpec(feature_dim=4, hidden_dim=0, num_classes=3)


def _batch(rng, n=12, spec=MLP):
    return Dataset(rng.normal(size=(n, spec.feature_dim)), rng.integers(0, spec.num_classes, size=n), spec.num_classes)


def _random_w(rng, spec=MLP):
    return ParameterVector(rng.normal(size=spec.num_parameters), layer_map_for(spec))


def test_layer_maps():
    assert layer_map_for(MLP) == (("hidden", 0, 25), ("output", 25, 18))
    assert layer_map_for(LINEAR) == (("output", 0, 15),)
    assert len(init_parameters(MLP, 0)) == MLP.num_parameters == 43


def test_init_parameters_is_seeded_with_zero_biases():
    w = init_parameters(MLP, 4)
    np.testing.assert_array_equal(w.values, init_parameters(MLP, 4).values)
    np.testing.assert_array_equal(w.values[20:25], 0.0)
    np.testing.assert_array_equal(w.values[-3:], 0.0)


def test_spec_of_recovers_architecture():
    assert spec_of(init_parameters(MLP, 0), 4, 3) == MLP
    assert spec_of(init_parameters(LINEAR, 0), 4, 3) == LINEAR
    with pytest.raises(ContractViolation):
        spec_of(init_parameters(MLP, 0), 5, 3)
    with pytest.raises(ContractViolation):
        spec_of(init_parameters(LINEAR, 0), 4, 2)


def test_zero_weights_give_uniform_loss_and_class_zero():
    spec = ModelSpec(feature_dim=3, hidden_dim=0, num_classes=10)
    rng = np.random.default_rng(1)
    labels = np.array([0, 0, 0, 4, 7, 9])
    batch = Dataset(rng.normal(size=(6, 3)), labels, 10)
    loss, accuracy = forward_loss(ParameterVector(np.zeros(spec.num_parameters), layer_map_for(spec)), batch)
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert accuracy == pytest.approx(0.5)


def _reference_cross_entropy(w: ParameterVector, batch: Dataset, spec: ModelSpec) -> float:
    F, H, C = spec.feature_dim, spec.hidden_dim, spec.num_classes
    p = w.values
    W1 = p[:F * H].reshape(F, H)
    b1 = p[F * H:F * H + H]
    W2 = p[F * H + H:F * H + H + H * C].reshape(H, C)
    b2 = p[F * H + H + H * C:]
    total = 0.0
    for x, y in zip(batch.features, batch.labels):
        hidden = np.tanh(x @ W1 + b1)
        logits = hidden @ W2 + b2
        total += math.log(sum(math.exp(z) for z in logits)) - logits[y]
    return total / len(batch)


def test_loss_matches_independent_implementation():
    rng = np.random.default_rng(2)
    for _ in range(5):
        w, batch = _random_w(rng), _batch(rng)
        loss, _ = forward_loss(w, batch)
        assert loss == pytest.approx(_reference_cross_entropy(w, batch, MLP), abs=1e-10)


def test_empty_batch_is_a_contract_violation():
    w = init_parameters(MLP, 0)
    with pytest.raises(ContractViolation):
        forward_loss(w, Dataset.empty(4, 3))
    with pytest.raises(ContractViolation):
        gradient(w, Dataset.empty(4, 3))


@pytest.mark.parametrize("spec", [MLP, LINEAR])
def test_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(3)
    h = 1e-5
    for _ in range(20):
        w, batch = _random_w(rng, spec), _batch(rng, spec=spec)
        analytic = gradient(w, batch).values
        numeric = np.zeros_like(analytic)
        for j in range(len(w)):
            step = np.zeros(len(w))
            step[j] = h
            up, _ = forward_loss(w.with_values(w.values + step), batch)
            down, _ = forward_loss(w.with_values(w.values - step), batch)
            numeric[j] = (up - down) / (2 * h)
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4


def test_gradient_vanishes_at_separable_optimum():
    spec = ModelSpec(feature_dim=2, hidden_dim=0, num_classes=2)
    data = Dataset(np.array([[1.0, 0.0], [-1.0, 0.0]]), [0, 1], 2)
    w0 = ParameterVector(np.zeros(spec.num_parameters), layer_map_for(spec))
    w, _ = sgd_epochs(w0, data, TrainConfig(local_epochs=5000, batch_size=2, learning_rate=1.0), seed=0)
    assert l2_norm(gradient(w, data)) < 1e-3


def test_gradient_is_invariant_to_duplication():
    rng = np.random.default_rng(4)
    w, batch = _random_w(rng), _batch(rng)
    doubled = Dataset(np.vstack([batch.features] * 2), np.concatenate([batch.labels] * 2), 3)
    np.testing.assert_allclose(gradient(w, doubled).values, gradient(w, batch).values, rtol=1e-12, atol=1e-14)


def test_local_train_on_empty_shard_is_zero():
    w = init_parameters(MLP, 0)
    g = local_train(w, Dataset.empty(4, 3), TrainConfig(), seed=1)
    np.testing.assert_array_equal(g.values, 0.0)
    assert g.layer_map == w.layer_map


def test_single_full_batch_step_is_scaled_gradient():
    rng = np.random.default_rng(5)
    w, shard = _random_w(rng), _batch(rng, n=20)
    cfg = TrainConfig(local_epochs=1, batch_size=64, learning_rate=0.3)
    g = local_train(w, shard, cfg, seed=9)
    np.testing.assert_allclose(g.values, 0.3 * gradient(w, shard).values, rtol=1e-10, atol=1e-13)


def test_local_train_is_deterministic_and_keeps_layout():
    rng = np.random.default_rng(6)
    w, shard = _random_w(rng), _batch(rng, n=50)
    cfg = TrainConfig(local_epochs=3, batch_size=8, learning_rate=0.05)
    first = local_train(w, shard, cfg, seed=12)
    np.testing.assert_array_equal(first.values, local_train(w, shard, cfg, seed=12).values)
    assert first.layer_map == w.layer_map
    assert not np.array_equal(first.values, local_train(w, shard, cfg, seed=13).values)


def test_reference_gradient_is_local_train():
    rng = np.random.default_rng(7)
    w, shard = _random_w(rng), _batch(rng, n=30)
    cfg = TrainConfig(local_epochs=2, batch_size=8, learning_rate=0.05)
    np.testing.assert_array_equal(reference_gradient(w, shard, cfg, 3).values, local_train(w, shard, cfg, 3).values)
    with pytest.raises(ConfigurationError):
        reference_gradient(w, Dataset.empty(4, 3), cfg, 3)


@pytest.mark.parametrize("seed", range(5))
def test_epoch_losses_decrease(seed):
    data = generate_synthetic(10, 50, 32, seed=seed)
    spec = ModelSpec(feature_dim=32, hidden_dim=16, num_classes=10)
    _, losses = sgd_epochs(init_parameters(spec, seed), data, TrainConfig(), seed)
    assert len(losses) == 5
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))


@pytest.mark.parametrize("seed", range(5))
def test_reference_update_agrees_with_benign_mean_on_iid_data(seed):
    data = generate_synthetic(10, 100, 32, seed=seed)
    topology = CloudTopology(num_clouds=1, client_cloud=(0,) * 5, c_intra=0.01, c_cross=0.09)
    shards = dirichlet_partition(data, 5, 1000.0, seed).shards
    split = carve_reference(shards, topology, 100, seed)
    spec = ModelSpec(feature_dim=32, hidden_dim=16, num_classes=10)
    w = init_parameters(spec, seed)
    cfg = TrainConfig()
    benign = mean_vector([local_train(w, s, cfg, seed + i) for i, s in enumerate(split.client_shards)])
    ref = reference_gradient(w, split.reference_shards[0], cfg, seed)
    assert cosine_similarity(ref, benign) > 0.5


def test_predict_and_evaluate_agree():
    rng = np.random.default_rng(8)
    w, batch = _random_w(rng), _batch(rng, n=40)
    _, accuracy = evaluate(w, batch)
    assert accuracy == pytest.approx(np.mean(predict(w, batch) == batch.labels))
