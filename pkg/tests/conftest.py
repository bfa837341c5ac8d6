import numpy as np
import pytest

from cloudfl.config.models import (
    DataConfig,
    ExperimentConfig,
    ModelConfig,
    TopologyConfig,
    TrainConfig,
)
from cloudfl.data import Dataset
from cloudfl.economy import CloudTopology
from cloudfl.linalg import LayerSegment, ParameterVector


def small_config(**overrides) -> ExperimentConfig:
    """Two clouds of four clients on a 3-class blob task; a few rounds run in well under a second."""
    config = ExperimentConfig(
        name="unit test",
        seed=11,
        rounds=3,
        alpha=1.0,
        reference_size=10,
        data=DataConfig(num_classes=3, samples_per_class=100, feature_dim=4),
        topology=TopologyConfig(num_clouds=2, clients_per_cloud=4),
        model=ModelConfig(hidden_dim=4),
        train=TrainConfig(local_epochs=1, batch_size=16, learning_rate=0.05),
    )
    return config.with_overrides(**overrides) if overrides else config


@pytest.fixture
def config() -> ExperimentConfig:
    return small_config()


@pytest.fixture
def blobs() -> Dataset:
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(3), 20)
    centers = np.eye(3, 4) * 4.0
    return Dataset(centers[labels] + rng.normal(size=(60, 4)), labels, 3)


@pytest.fixture
def two_cloud_topology() -> CloudTopology:
    return CloudTopology(num_clouds=2, client_cloud=(0, 0, 1, 1), c_intra=0.01, c_cross=0.09)


def two_layer(hidden, last) -> ParameterVector:
    """Vector with a 'hidden' block followed by an 'output' block."""
    hidden = np.asarray(hidden, dtype=np.float64)
    last = np.asarray(last, dtype=np.float64)
    return ParameterVector(
        np.concatenate([hidden, last]),
        (LayerSegment("hidden", 0, hidden.size), LayerSegment("output", hidden.size, last.size)),
    )


def vec(*values) -> ParameterVector:
    return ParameterVector.single_layer(values)
