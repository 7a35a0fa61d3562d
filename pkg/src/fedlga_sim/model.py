"""Small differentiable classifiers with analytic gradients.

Parameters live in a single flat float64 vector (``ParamVector``). Layout per layer is the
row-major weight matrix ``(fan_in, fan_out)`` followed by the bias of length ``fan_out``:

- logistic: ``W (d x C), b (C)``
- mlp: ``W1 (d x H), b1 (H), W2 (H x C), b2 (C)`` with a ReLU hidden layer
"""

from dataclasses import dataclass
from enum import Enum
from typing import Protocol

import numpy as np
import numpy.typing as npt

from fedlga_sim.errors import DimensionMismatchError, EmptyDatasetError

ParamVector = npt.NDArray[np.float64]

_SEED_MASK = (1 << 64) - 1


class ModelKind(str, Enum):
    """Supported classifier families."""

    LOGISTIC = "logistic"
    MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    """Shape of a classifier.

    Args:
        kind: Model family
        input_dim: Number of input features
        num_classes: Number of output classes (C >= 2)
        hidden_dim: Hidden width, only used by the MLP
    """

    kind: ModelKind
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            msg = f"input_dim must be positive, got {self.input_dim}"
            raise ValueError(msg)
        if self.num_classes < 2:
            msg = f"num_classes must be at least 2, got {self.num_classes}"
            raise ValueError(msg)
        if self.kind is ModelKind.MLP and self.hidden_dim < 1:
            msg = f"mlp needs a positive hidden_dim, got {self.hidden_dim}"
            raise ValueError(msg)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every dense layer, input to output."""
        if self.kind is ModelKind.LOGISTIC:
            return [(self.input_dim, self.num_classes)]
        return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.num_classes)]

    @property
    def num_params(self) -> int:
        """Length of the flat parameter vector."""
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)

    def bias_slices(self) -> list[slice]:
        """Slices of the flat vector that hold biases."""
        slices = []
        offset = 0
        for fan_in, fan_out in self.layer_shapes:
            offset += fan_in * fan_out
            slices.append(slice(offset, offset + fan_out))
            offset += fan_out
        return slices


@dataclass(frozen=True, eq=False)
class Batch:
    """A minibatch of samples.

    Args:
        features: Matrix with one row per sample
        labels: Class index per row
    """

    features: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            msg = f"features must be a matrix, got shape {self.features.shape}"
            raise ValueError(msg)
        if self.features.shape[0] < 1:
            msg = "a batch needs at least one sample"
            raise EmptyDatasetError(msg)
        if self.labels.shape != (self.features.shape[0],):
            msg = (
                f"labels shape {self.labels.shape} does not match "
                f"{self.features.shape[0]} feature rows"
            )
            raise DimensionMismatchError(msg)

    def __len__(self) -> int:
        return int(self.features.shape[0])


class LabelledSamples(Protocol):
    """Anything with a feature matrix and a label vector (Batch, Dataset, Shard)."""

    features: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]


def _check_dims(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> None:
    if params.shape != (spec.num_params,):
        msg = f"expected {spec.num_params} parameters for {spec.kind.value}, got {params.shape}"
        raise DimensionMismatchError(msg)
    if features.shape[1] != spec.input_dim:
        msg = f"expected {spec.input_dim} input features, got {features.shape[1]}"
        raise DimensionMismatchError(msg)


def unpack_params(spec: ModelSpec, params: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split the flat vector into per-layer ``(W, b)`` views (no copies)."""
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes:
        weights = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = params[offset : offset + fan_out]
        offset += fan_out
        layers.append((weights, bias))
    return layers


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, deterministic in ``(spec, seed)``.

    Args:
        spec: Model shape
        seed: Any 64-bit integer (negative values are taken modulo 2**64)

    Returns:
        Fresh parameter vector
    """
    rng = np.random.default_rng(seed & _SEED_MASK)
    params = np.zeros(spec.num_params, dtype=np.float64)
    offset = 0
    for fan_in, fan_out in spec.layer_shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        size = fan_in * fan_out
        params[offset : offset + size] = rng.uniform(-limit, limit, size=size)
        offset += size + fan_out
    return params


def _forward(
    spec: ModelSpec, params: ParamVector, features: np.ndarray
) -> tuple[np.ndarray, np.ndarray | None]:
    """Return logits and, for the MLP, the hidden pre-activations."""
    layers = unpack_params(spec, params)
    if spec.kind is ModelKind.LOGISTIC:
        weights, bias = layers[0]
        return features @ weights + bias, None
    (w1, b1), (w2, b2) = layers
    pre = features @ w1 + b1
    return np.maximum(pre, 0.0) @ w2 + b2, pre


def logits(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Raw class scores, one row per sample."""
    _check_dims(spec, params, features)
    return _forward(spec, params, features)[0]


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable under large scores."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward_loss(spec: ModelSpec, params: ParamVector, batch: LabelledSamples) -> float:
    """Mean softmax cross-entropy over the batch."""
    _check_dims(spec, params, batch.features)
    scores, _ = _forward(spec, params, batch.features)
    log_probs = _log_softmax(scores)
    rows = np.arange(log_probs.shape[0])
    return float(-log_probs[rows, batch.labels].mean())


def gradient(spec: ModelSpec, params: ParamVector, batch: LabelledSamples) -> ParamVector:
    """Analytic gradient of :func:`forward_loss` with respect to the flat parameters."""
    _check_dims(spec, params, batch.features)
    features = batch.features
    n = features.shape[0]
    scores, pre = _forward(spec, params, features)
    d_scores = softmax(scores)
    d_scores[np.arange(n), batch.labels] -= 1.0
    d_scores /= n

    grad = np.empty_like(params)
    if spec.kind is ModelKind.LOGISTIC:
        parts = [features.T @ d_scores, d_scores.sum(axis=0)]
    else:
        (_, _), (w2, _) = unpack_params(spec, params)
        hidden = np.maximum(pre, 0.0)
        d_hidden = d_scores @ w2.T
        d_hidden[pre <= 0.0] = 0.0
        parts = [
            features.T @ d_hidden,
            d_hidden.sum(axis=0),
            hidden.T @ d_scores,
            d_scores.sum(axis=0),
        ]

    offset = 0
    for part in parts:
        size = part.size
        grad[offset : offset + size] = part.ravel()
        offset += size
    return grad


def finite_diff_gradient(
    spec: ModelSpec, params: ParamVector, batch: LabelledSamples, h: float = 1e-5
) -> ParamVector:
    """Central-difference estimate of the gradient, one coordinate at a time.

    Args:
        spec: Model shape
        params: Point of evaluation
        batch: Samples defining the loss
        h: Step size, must be positive

    Returns:
        Gradient estimate with the same shape as ``params``
    """
    if h <= 0:
        msg = f"finite-difference step must be positive, got {h}"
        raise ValueError(msg)
    estimate = np.empty_like(params)
    shifted = params.copy()
    for j in range(params.size):
        original = shifted[j]
        shifted[j] = original + h
        upper = forward_loss(spec, shifted, batch)
        shifted[j] = original - h
        lower = forward_loss(spec, shifted, batch)
        shifted[j] = original
        estimate[j] = (upper - lower) / (2.0 * h)
    return estimate


def predict(spec: ModelSpec, params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(logits(spec, params, features), axis=1)


def accuracy(spec: ModelSpec, params: ParamVector, dataset: LabelledSamples) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    if dataset.features.shape[0] == 0:
        msg = "accuracy needs a nonempty dataset"
        raise EmptyDatasetError(msg)
    return float(np.mean(predict(spec, params, dataset.features) == dataset.labels))


def is_finite(params: ParamVector) -> bool:
    """True when no coordinate is NaN or infinite."""
    return bool(np.all(np.isfinite(params)))
