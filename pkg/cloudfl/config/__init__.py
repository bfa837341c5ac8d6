from cloudfl.config.loader import load_config
from cloudfl.config.models import (
    AblationFlags,
    AttackConfig,
    AttackKind,
    DataConfig,
    ExperimentConfig,
    ModelConfig,
    ModelSpec,
    Strategy,
    TopologyConfig,
    TrainConfig,
)

__all__ = [
    "AblationFlags",
    "AttackConfig",
    "AttackKind",
    "DataConfig",
    "ExperimentConfig",
    "ModelConfig",
    "ModelSpec",
    "Strategy",
    "TopologyConfig",
    "TrainConfig",
    "load_config",
]
