"""Dense 784-128-10 network with plain minibatch SGD, written against numpy only.

The layer stack is fixed: flatten (inputs arrive as 784-vectors), a 128-unit
ReLU layer, inverted dropout, and a 10-way softmax output. Cross-entropy is
the training loss. All production arithmetic is float32; the operations are
dtype-generic so test oracles can run the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INPUT_SIZE = 784
HIDDEN_SIZE = 128
N_CLASSES = 10

# 784*128 + 128 + 128*10 + 10
PARAM_COUNT = 101_770


@dataclass
class ModelParams:
    """The four trainable tensors, in the fixed order w1, b1, w2, b2."""

    w1: np.ndarray  # (784, 128)
    b1: np.ndarray  # (128,)
    w2: np.ndarray  # (128, 10)
    b2: np.ndarray  # (10,)

    def tensors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (self.w1, self.b1, self.w2, self.b2)

    def copy(self) -> "ModelParams":
        return ModelParams(*(t.copy() for t in self.tensors()))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(*(t.astype(dtype) for t in self.tensors()))

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def tobytes(self) -> bytes:
        """Concatenated little-endian float bytes, used for digests and bit-compares."""
        return b"".join(np.ascontiguousarray(t).astype("<f4", copy=False).tobytes()
                        for t in self.tensors())


@dataclass
class Gradients:
    """Loss gradients, same shapes as ModelParams."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def tensors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return (self.w1, self.b1, self.w2, self.b2)


@dataclass
class TrainConfig:
    """Knobs for local training: client fraction, epochs, batch size, step size."""

    client_fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.065
    dropout_rate: float = 0.35
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError(f"client_fraction must be in (0, 1], got {self.client_fraction}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    n_samples: int


@dataclass
class ForwardCache:
    """Everything the backward pass needs from one forward pass."""

    params: ModelParams
    inputs: np.ndarray
    pre_hidden: np.ndarray   # z1, before ReLU
    hidden: np.ndarray       # a1, after ReLU and dropout
    dropout_mask: np.ndarray | None
    dropout_rate: float
    probs: np.ndarray


def init_model(seed: int) -> ModelParams:
    """Fan-balanced uniform init for the weight matrices, zero biases.

    Weights are drawn from U(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
    Deterministic for a given seed.
    """
    rng = np.random.default_rng(seed)
    limit1 = np.sqrt(6.0 / (INPUT_SIZE + HIDDEN_SIZE))
    limit2 = np.sqrt(6.0 / (HIDDEN_SIZE + N_CLASSES))
    return ModelParams(
        w1=rng.uniform(-limit1, limit1, (INPUT_SIZE, HIDDEN_SIZE)).astype(np.float32),
        b1=np.zeros(HIDDEN_SIZE, dtype=np.float32),
        w2=rng.uniform(-limit2, limit2, (HIDDEN_SIZE, N_CLASSES)).astype(np.float32),
        b2=np.zeros(N_CLASSES, dtype=np.float32),
    )


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted by the row max for numerical stability."""
    axis = x.ndim - 1
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def forward(
    params: ModelParams,
    batch: np.ndarray,
    train: bool = False,
    dropout_rate: float = 0.0,
    dropout_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a (N, 784) batch and return class probabilities.

    In eval mode dropout is the identity. In train mode with a nonzero rate the
    caller supplies a keep-mask of shape (N, 128); surviving units are scaled by
    1/(1 - rate) so evaluation needs no rescaling.
    """
    if batch.ndim != 2 or batch.shape[1] != INPUT_SIZE:
        raise ValueError(f"batch must have shape (N, {INPUT_SIZE}), got {batch.shape}")
    z1 = batch @ params.w1 + params.b1
    a1 = relu(z1)
    mask = None
    if train and dropout_rate > 0.0:
        if dropout_mask is None:
            raise ValueError("train-mode forward with dropout_rate > 0 requires a dropout_mask")
        if dropout_mask.shape != a1.shape:
            raise ValueError(f"dropout_mask shape {dropout_mask.shape} != hidden shape {a1.shape}")
        mask = dropout_mask
        a1 = a1 * mask * (1.0 / (1.0 - dropout_rate))
    probs = softmax(a1 @ params.w2 + params.b2)
    cache = ForwardCache(
        params=params,
        inputs=batch,
        pre_hidden=z1,
        hidden=a1,
        dropout_mask=mask,
        dropout_rate=dropout_rate if mask is not None else 0.0,
        probs=probs,
    )
    return probs, cache


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean of -ln(p[true label]) over the batch, with p clamped to >= 1e-12."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
        raise ValueError(f"labels must lie in 0..{N_CLASSES - 1}")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, 1e-12)).mean())


def backward(cache: ForwardCache, labels: np.ndarray) -> Gradients:
    """Gradients of the mean cross-entropy w.r.t. every parameter.

    Reuses the dropout mask recorded by the forward pass, so the gradient
    matches the loss that was actually evaluated.
    """
    p = cache.params
    n = cache.inputs.shape[0]
    dlogits = cache.probs.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits /= n

    gw2 = cache.hidden.T @ dlogits
    gb2 = dlogits.sum(axis=0)

    dhidden = dlogits @ p.w2.T
    if cache.dropout_mask is not None:
        dhidden = dhidden * cache.dropout_mask * (1.0 / (1.0 - cache.dropout_rate))
    dhidden = dhidden * (cache.pre_hidden > 0)

    gw1 = cache.inputs.T @ dhidden
    gb1 = dhidden.sum(axis=0)
    return Gradients(w1=gw1, b1=gb1, w2=gw2, b2=gb2)


def sgd_step(params: ModelParams, grads: Gradients, step_size: float) -> ModelParams:
    """One fixed-step-size descent update; returns new params, inputs untouched."""
    return ModelParams(*(
        t - t.dtype.type(step_size) * g
        for t, g in zip(params.tensors(), grads.tensors())
    ))


def train_epochs(
    params: ModelParams,
    shard,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Run local_epochs full passes of minibatch SGD over one shard.

    Every epoch reshuffles the sample order with the supplied generator (or a
    fresh one seeded from config.seed); the final partial batch is used as-is.
    The caller's params are not mutated.
    """
    n = len(shard.labels)
    if n == 0:
        raise ValueError("cannot train on an empty shard")
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds shard size {n}")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    current = params.copy()
    rate = config.dropout_rate
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = shard.images[idx]
            yb = shard.labels[idx]
            mask = None
            if rate > 0.0:
                mask = (rng.random((len(idx), HIDDEN_SIZE)) >= rate).astype(xb.dtype)
            _, cache = forward(current, xb, train=True, dropout_rate=rate, dropout_mask=mask)
            grads = backward(cache, yb)
            current = sgd_step(current, grads, config.learning_rate)
    return current


def evaluate(params: ModelParams, images: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Accuracy and mean cross-entropy on a labelled set, in eval mode.

    Predictions are argmax over class probabilities; on ties the lowest class
    index wins (relevant for degenerate models such as all-zero weights).
    """
    probs, _ = forward(params, images)
    predicted = probs.argmax(axis=1)
    correct = int((predicted == labels).sum())
    return EvalResult(
        accuracy=correct / len(labels),
        mean_loss=cross_entropy_loss(probs, labels),
        n_samples=len(labels),
    )
