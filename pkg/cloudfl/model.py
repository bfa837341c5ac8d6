"""
Small differentiable classifier with hand-written gradients.

Two shapes share one flat parameter layout:
- hidden_dim > 0: x -> tanh(x W1 + b1) -> W2 + b2 -> softmax
  layer map [("hidden", 0, F*H + H), ("output", F*H + H, H*C + C)]
- hidden_dim = 0: softmax regression, layer map [("output", 0, F*C + C)]

Inside a segment the weight matrix is stored row-major, followed by the bias.
The architecture is recovered from the layer map and the batch, so a
ParameterVector is all a caller needs to pass around.
"""
from typing import List, Tuple

import numpy as np

from cloudfl.config.models import ModelSpec, TrainConfig
from cloudfl.data import Dataset
from cloudfl.errors import ConfigurationError, ContractViolation
from cloudfl.linalg import LayerSegment, ParameterVector


def layer_map_for(spec: ModelSpec) -> Tuple[LayerSegment, ...]:
    F, H, C = spec.feature_dim, spec.hidden_dim, spec.num_classes
    if H == 0:
        return (LayerSegment("output", 0, F * C + C),)
    return (
        LayerSegment("hidden", 0, F * H + H),
        LayerSegment("output", F * H + H, H * C + C),
    )


def init_parameters(spec: ModelSpec, seed: int) -> ParameterVector:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    F, H, C = spec.feature_dim, spec.hidden_dim, spec.num_classes
    if H == 0:
        parts = [rng.normal(0.0, 1.0 / np.sqrt(F), size=F * C), np.zeros(C)]
    else:
        parts = [
            rng.normal(0.0, 1.0 / np.sqrt(F), size=F * H), np.zeros(H),
            rng.normal(0.0, 1.0 / np.sqrt(H), size=H * C), np.zeros(C),
        ]
    return ParameterVector(np.concatenate(parts), layer_map_for(spec))


def spec_of(w: ParameterVector, feature_dim: int, num_classes: int) -> ModelSpec:
    """Architecture implied by w's layer map for the given input/output sizes."""
    names = tuple(segment.name for segment in w.layer_map)
    if names == ("output",):
        spec = ModelSpec(feature_dim=feature_dim, hidden_dim=0, num_classes=num_classes)
    elif names == ("hidden", "output"):
        hidden_len = w.layer_map[0].length
        if hidden_len % (feature_dim + 1):
            raise ContractViolation(f"hidden segment of {hidden_len} entries does not fit feature_dim={feature_dim}")
        spec = ModelSpec(feature_dim=feature_dim, hidden_dim=hidden_len // (feature_dim + 1), num_classes=num_classes)
    else:
        raise ContractViolation(f"unrecognised layer map {names}")
    if layer_map_for(spec) != w.layer_map:
        raise ContractViolation(
            f"parameter vector of length {len(w)} does not match a model with "
            f"feature_dim={feature_dim}, num_classes={num_classes}"
        )
    return spec


# --- Forward / backward on raw arrays ---

def _unpack(params: np.ndarray, spec: ModelSpec):
    F, H, C = spec.feature_dim, spec.hidden_dim, spec.num_classes
    if H == 0:
        return None, None, params[:F * C].reshape(F, C), params[F * C:]
    cut = F * H + H
    W1 = params[:F * H].reshape(F, H)
    b1 = params[F * H:cut]
    W2 = params[cut:cut + H * C].reshape(H, C)
    b2 = params[cut + H * C:]
    return W1, b1, W2, b2


def _forward(params: np.ndarray, X: np.ndarray, spec: ModelSpec):
    W1, b1, W2, b2 = _unpack(params, spec)
    A = X if W1 is None else np.tanh(X @ W1 + b1)
    return A, A @ W2 + b2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_and_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray, spec: ModelSpec) -> Tuple[float, np.ndarray]:
    n = y.size
    A, logits = _forward(params, X, spec)
    log_p = _log_softmax(logits)
    loss = float(-log_p[np.arange(n), y].mean())

    delta = np.exp(log_p)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    W1, _, W2, _ = _unpack(params, spec)
    grads = [(A.T @ delta).ravel(), delta.sum(axis=0)]
    if W1 is not None:
        dZ = (delta @ W2.T) * (1.0 - A ** 2)
        grads = [(X.T @ dZ).ravel(), dZ.sum(axis=0)] + grads
    return loss, np.concatenate(grads)


def _require_batch(w: ParameterVector, batch: Dataset) -> ModelSpec:
    if len(batch) == 0:
        raise ContractViolation("empty batch")
    return spec_of(w, batch.feature_dim, batch.num_classes)


# --- Public operations ---

def forward_loss(w: ParameterVector, batch: Dataset) -> Tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy (argmax ties go to the lower class id)."""
    spec = _require_batch(w, batch)
    _, logits = _forward(w.values, batch.features, spec)
    log_p = _log_softmax(logits)
    loss = float(-log_p[np.arange(len(batch)), batch.labels].mean())
    accuracy = float(np.mean(np.argmax(logits, axis=1) == batch.labels))
    return loss, accuracy


def gradient(w: ParameterVector, batch: Dataset) -> ParameterVector:
    """Exact gradient of the mean cross-entropy at w."""
    spec = _require_batch(w, batch)
    _, grad = _loss_and_grad(w.values, batch.features, batch.labels, spec)
    return w.with_values(grad)


def predict(w: ParameterVector, data: Dataset) -> np.ndarray:
    spec = spec_of(w, data.feature_dim, data.num_classes)
    _, logits = _forward(w.values, data.features, spec)
    return np.argmax(logits, axis=1)


def evaluate(w: ParameterVector, data: Dataset) -> Tuple[float, float]:
    """(loss, accuracy) on a held-out set."""
    return forward_loss(w, data)


def sgd_epochs(w_start: ParameterVector, shard: Dataset, cfg: TrainConfig, seed: int) -> Tuple[ParameterVector, List[float]]:
    """
    Plain mini-batch SGD for cfg.local_epochs epochs.

    Returns the trained parameters and the mean mini-batch loss of every epoch.
    Batch order is reshuffled each epoch from `seed`.
    """
    if len(shard) == 0:
        return w_start, []
    spec = spec_of(w_start, shard.feature_dim, shard.num_classes)
    rng = np.random.default_rng(seed)
    params = w_start.values.copy()
    epoch_losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(shard))
        losses = []
        for start in range(0, len(shard), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grad = _loss_and_grad(params, shard.features[idx], shard.labels[idx], spec)
            params -= cfg.learning_rate * grad
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
    return w_start.with_values(params), epoch_losses


def local_train(w_global: ParameterVector, shard: Dataset, cfg: TrainConfig, seed: int) -> ParameterVector:
    """Model update g = w_global - w_local after local SGD; zero for an empty shard."""
    if len(shard) == 0:
        return ParameterVector.zeros_like(w_global)
    w_local, _ = sgd_epochs(w_global, shard, cfg, seed)
    return w_global - w_local


def reference_gradient(w_global: ParameterVector, ref_shard: Dataset, cfg: TrainConfig, seed: int) -> ParameterVector:
    """Server-side update on a cloud's clean reference shard (same procedure as local_train)."""
    if len(ref_shard) == 0:
        raise ConfigurationError("reference shard is empty; set reference_size > 0")
    return local_train(w_global, ref_shard, cfg, seed)
