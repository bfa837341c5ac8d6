import math
from enum import Enum
from typing import Optional

import pytz
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# --- Enumerations ---

class AttackKind(str, Enum):
    """Poisoning behaviours a malicious client can run."""
    NONE = "none"
    LABEL_FLIP = "label_flip"        # data-level, before local training
    GAUSSIAN = "gaussian"            # update-level, after local training
    SIGN_FLIP = "sign_flip"
    SCALE = "scale"


class Strategy(str, Enum):
    """Aggregation strategies selectable by name."""
    FEDAVG = "fedavg"
    KRUM = "krum"
    TRIMMED_MEAN = "trimmed_mean"
    MEDIAN = "median"
    FLTRUST = "fltrust"
    COST_TRUSTFL = "cost_trustfl"


class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)


# --- Model and training ---

class ModelSpec(_Schema):
    """Shape of the classifier. hidden_dim=0 means softmax regression."""
    feature_dim: int = Field(..., gt=0, description="Input feature count.")
    hidden_dim: int = Field(16, ge=0, description="Hidden tanh units (0 = softmax regression).")
    num_classes: int = Field(..., gt=0, description="Number of output classes.")

    @property
    def num_parameters(self) -> int:
        if self.hidden_dim == 0:
            return self.feature_dim * self.num_classes + self.num_classes
        return (self.feature_dim * self.hidden_dim + self.hidden_dim
                + self.hidden_dim * self.num_classes + self.num_classes)


class ModelConfig(_Schema):
    hidden_dim: int = Field(16, ge=0, description="Hidden tanh units (0 = softmax regression).")


class TrainConfig(_Schema):
    """Local SGD knobs (E, batch size, learning rate)."""
    local_epochs: int = Field(5, gt=0, description="Local epochs E.")
    batch_size: int = Field(32, gt=0, description="Mini-batch size.")
    learning_rate: float = Field(0.01, gt=0, description="Local SGD step size.")


# --- Data and topology ---

class DataConfig(_Schema):
    num_classes: int = Field(10, gt=1, description="Synthetic classes.")
    samples_per_class: int = Field(1000, gt=0, description="Synthetic samples generated per class.")
    feature_dim: int = Field(32, gt=0, description="Synthetic feature dimension.")
    cluster_std: float = Field(1.0, gt=0, description="Per-coordinate std of each class blob.")
    center_distance: float = Field(4.0, gt=0, description="Distance of class centers from the origin.")
    test_fraction: float = Field(0.2, gt=0, lt=1, description="Held-out test split, fixed before partitioning.")
    path: Optional[str] = Field(None, description="Optional columnar dataset file replacing the synthetic data.")


class TopologyConfig(_Schema):
    num_clouds: int = Field(3, gt=0, description="Cloud regions K.")
    clients_per_cloud: int = Field(15, gt=0, description="Clients n_k in every region.")
    c_intra: float = Field(0.01, ge=0, description="Price per GB within a cloud.")
    c_cross: float = Field(0.09, ge=0, description="Price per GB across clouds.")
    global_home: Optional[int] = Field(None, ge=0, description="Cloud hosting the global aggregator (None = external).")
    remote_fraction: float = Field(0.0, ge=0, lt=1, description="Share of each cloud's clients hosted in another cloud.")
    bytes_per_param: int = Field(4, gt=0, description="Bytes transferred per model parameter.")

    @model_validator(mode="after")
    def _check_prices(self):
        if self.c_cross < self.c_intra:
            raise ValueError("c_cross must be >= c_intra")
        if self.global_home is not None and self.global_home >= self.num_clouds:
            raise ValueError(f"global_home {self.global_home} is not a cloud index (K={self.num_clouds})")
        return self


# --- Attacks and ablations ---

class AttackConfig(_Schema):
    kind: AttackKind = Field(AttackKind.NONE, description="Attack run by malicious clients.")
    sigma: Optional[float] = Field(None, ge=0, description="Gaussian std; None = mean benign update norm at round 1.")
    scale_factor: float = Field(10.0, description="Amplification for the scaling attack.")
    malicious_fraction: float = Field(0.0, ge=0, le=1, description="Fraction f/N of malicious clients.")
    seed: Optional[int] = Field(None, description="Attack seed; None = derived from the experiment seed.")


class AblationFlags(_Schema):
    shapley_weighting: bool = Field(True, description="Weight trust scores by reputation.")
    cost_aware_selection: bool = Field(True, description="Select by r_hat / c^lambda (else random).")
    hierarchical: bool = Field(True, description="Two-level aggregation (else one flat aggregation).")
    trust_normalization: bool = Field(True, description="Rescale updates to the reference norm.")


# --- Experiment ---

class ExperimentConfig(_Schema):
    """Every knob of one simulated experiment."""
    name: str = Field("experiment", description="Label used for run folders.")
    seed: int = Field(..., description="Single root seed for data, attacks, selection and training.")
    rounds: int = Field(..., ge=1, description="Global rounds T.")
    strategy: Strategy = Field(Strategy.COST_TRUSTFL, description="Aggregation strategy.")
    lam: float = Field(0.3, ge=0, alias="lambda", description="Cost exponent in r_hat / c^lambda.")
    gamma: float = Field(0.9, ge=0, lt=1, description="Reputation EMA factor.")
    eta: float = Field(1.0, gt=0, description="Global learning rate.")
    alpha: float = Field(0.5, gt=0, description="Dirichlet concentration for non-IID partitioning.")
    m_per_cloud: Optional[int] = Field(None, gt=0, description="Participants per cloud (None = ceil(participation * n_k)).")
    participation: float = Field(0.5, gt=0, le=1, description="Used when m_per_cloud is unset.")
    reference_size: int = Field(100, ge=0, description="Reference samples carved per cloud.")
    trim_fraction: float = Field(0.1, ge=0, lt=0.5, description="Trimmed-mean fraction per side.")
    krum_f: Optional[int] = Field(None, ge=0, description="Krum Byzantine bound (None = largest feasible).")
    full_vector_trust: bool = Field(False, description="Trust cosine over the full vector instead of the last layer.")
    charge_edge_legs: bool = Field(True, description="Charge edge->global legs (off = client legs only).")
    charge_downlink: bool = Field(False, description="Also charge the broadcast legs.")
    workers: int = Field(1, ge=1, description="Threads used for local training within a round.")
    timezone: str = Field("UTC", description="Timezone used for run folder names and summary timestamps.")

    data: DataConfig = Field(default_factory=DataConfig)
    topology: TopologyConfig = Field(default_factory=TopologyConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    ablation: AblationFlags = Field(default_factory=AblationFlags)

    @field_validator("timezone")
    @classmethod
    def _check_timezone(cls, value: str) -> str:
        if value not in pytz.all_timezones_set:
            raise ValueError(f"unknown timezone '{value}'")
        return value

    @model_validator(mode="after")
    def _check_participants(self):
        if self.m_per_cloud is not None and self.m_per_cloud > self.topology.clients_per_cloud:
            raise ValueError(
                f"m_per_cloud={self.m_per_cloud} exceeds clients_per_cloud={self.topology.clients_per_cloud}"
            )
        return self

    @property
    def participants_per_cloud(self) -> int:
        if self.m_per_cloud is not None:
            return self.m_per_cloud
        n = self.topology.clients_per_cloud
        return max(1, min(n, math.ceil(self.participation * n - 1e-9)))

    def model_spec(self, feature_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(feature_dim=feature_dim, hidden_dim=self.model.hidden_dim, num_classes=num_classes)

    def with_overrides(self, **updates) -> "ExperimentConfig":
        """Validated copy with dotted-key overrides (`attack.kind="gaussian"`)."""
        payload = self.model_dump(by_alias=True, mode="json")
        for key, value in updates.items():
            node = payload
            *parents, leaf = key.replace("__", ".").split(".")
            for part in parents:
                node = node[part]
            if leaf == "lam":
                leaf = "lambda"
            node[leaf] = value.value if isinstance(value, Enum) else value
        return ExperimentConfig.model_validate(payload)
