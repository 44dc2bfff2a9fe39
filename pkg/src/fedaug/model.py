"""Small feed-forward classifier with explicit forward/backward passes.

The model is an MLP over flat float64 parameter vectors: cross-entropy loss
and its gradient are computed by hand-rolled backprop (log-sum-exp trick for
stability), the invariance penalty ||d/dw f(w * theta)|_{w=1}||^2 and its
gradient come from the chain-rule identity g = <theta, grad f(theta)> plus a
finite-difference Hessian-vector product, and optimizers are plain SGD and
bias-corrected Adam.  Everything is a pure function over immutable inputs so
client training can run in parallel without shared state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import ensure_finite
from .rng import RngStream


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the classifier: input_dim -> hidden_dims -> num_classes.

    ``hidden_dims`` may be empty, giving a linear softmax classifier.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim <= 0 or any(h <= 0 for h in self.hidden_dims):
            raise ValueError("all layer dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation: {self.activation!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)


def param_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, offset) for each weight/bias block in the flat vector."""
    layout = []
    offset = 0
    dims = spec.layer_dims
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        layout.append((f"W{layer}", (fan_in, fan_out), offset))
        offset += fan_in * fan_out
        layout.append((f"b{layer}", (fan_out,), offset))
        offset += fan_out
    return layout


def num_params(spec: ModelSpec) -> int:
    name, shape, offset = param_layout(spec)[-1]
    return offset + int(np.prod(shape))


def _unpack(spec: ModelSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer into the flat parameter vector."""
    if theta.shape != (num_params(spec),):
        raise ValueError(
            f"parameter vector has length {theta.shape}, model needs {num_params(spec)}"
        )
    layers = []
    layout = param_layout(spec)
    for i in range(0, len(layout), 2):
        _, w_shape, w_off = layout[i]
        _, b_shape, b_off = layout[i + 1]
        w = theta[w_off : w_off + w_shape[0] * w_shape[1]].reshape(w_shape)
        b = theta[b_off : b_off + b_shape[0]]
        layers.append((w, b))
    return layers


def init_params(spec: ModelSpec, stream: RngStream) -> np.ndarray:
    """Glorot-uniform weights, zero biases, drawn layer by layer from ``stream``."""
    theta = np.zeros(num_params(spec))
    for w, b in _unpack(spec, theta):
        bound = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = stream.generator.uniform(-bound, bound, size=w.shape)
    return theta


@dataclass(frozen=True)
class Batch:
    """A mini-batch of flattened inputs and integer class labels."""

    inputs: np.ndarray  # (batch, input_dim) float64
    labels: np.ndarray  # (batch,) int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ValueError(f"inputs must be (batch, dim) with batch >= 1, got {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ValueError("labels must be one integer per input row")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.inputs.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch input dim {batch.inputs.shape[1]} != model input dim {spec.input_dim}"
        )
    if batch.labels.max() >= spec.num_classes:
        raise ValueError("label out of range for num_classes")


def _forward_cached(spec, theta, inputs):
    """Activations per layer; the last entry is the logits."""
    acts = [inputs]
    layers = _unpack(spec, theta)
    for w, b in layers[:-1]:
        acts.append(np.maximum(acts[-1] @ w + b, 0.0))
    w, b = layers[-1]
    acts.append(acts[-1] @ w + b)
    return acts


def forward(spec: ModelSpec, theta: np.ndarray, batch: Batch) -> np.ndarray:
    """Logits of shape (batch, num_classes)."""
    _check_batch(spec, batch)
    return ensure_finite(_forward_cached(spec, theta, batch.inputs)[-1], "logits")


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(spec: ModelSpec, theta: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient in theta."""
    _check_batch(spec, batch)
    acts = _forward_cached(spec, theta, batch.inputs)
    logits = acts[-1]
    n = batch.size
    rows = np.arange(n)

    log_probs = _log_softmax(logits)
    loss = float(-log_probs[rows, batch.labels].mean())

    # dL/dlogits = (softmax - onehot) / n
    dz = np.exp(log_probs)
    dz[rows, batch.labels] -= 1.0
    dz /= n

    grad = np.zeros_like(theta)
    layers = _unpack(spec, theta)
    grad_layers = _unpack(spec, grad)
    for layer in range(len(layers) - 1, -1, -1):
        gw, gb = grad_layers[layer]
        gw[...] = acts[layer].T @ dz
        gb[...] = dz.sum(axis=0)
        if layer > 0:
            da = dz @ layers[layer][0].T
            dz = da * (acts[layer] > 0.0)

    ensure_finite(grad, "loss gradient")
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, grad


def accuracy(spec: ModelSpec, theta: np.ndarray, batch: Batch) -> float:
    """Fraction of argmax predictions matching labels (ties -> lowest class)."""
    logits = forward(spec, theta, batch)
    return float((logits.argmax(axis=1) == batch.labels).mean())


def fd_hvp(grad_fn, theta: np.ndarray, direction: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Hessian-vector product by central finite differences of ``grad_fn``.

    Step size eps = rel_step * (1 + max|theta|) / (1 + max|direction|), so the
    actual perturbation eps * direction scales with the parameter magnitude.
    """
    eps = rel_step * (1.0 + np.abs(theta).max()) / (1.0 + np.abs(direction).max())
    g_plus = grad_fn(theta + eps * direction)
    g_minus = grad_fn(theta - eps * direction)
    return (g_plus - g_minus) / (2.0 * eps)


def irm_penalty_and_grad(
    spec: ModelSpec, theta: np.ndarray, batch: Batch
) -> tuple[float, np.ndarray]:
    """Invariance penalty g^2 with g = d/dw f(w * theta) at w = 1, and its gradient.

    By the chain rule g = <theta, grad f(theta)>, and
    grad(g^2) = 2 g (grad f(theta) + H(theta) theta) with the Hessian-vector
    product along theta taken by central finite differences of the gradient.
    """
    _, grad_f = loss_and_grad(spec, theta, batch)
    g = float(theta @ grad_f)
    penalty = g * g
    if g == 0.0:
        return 0.0, np.zeros_like(theta)
    hvp = fd_hvp(lambda t: loss_and_grad(spec, t, batch)[1], theta, theta)
    grad = 2.0 * g * (grad_f + hvp)
    return penalty, ensure_finite(grad, "penalty gradient")


@dataclass(frozen=True)
class OptimizerState:
    """SGD or Adam state over a flat parameter vector."""

    kind: str  # "sgd" | "adam"
    learning_rate: float
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    step_count: int = 0


def make_optimizer(kind: str, learning_rate: float, dim: int) -> OptimizerState:
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer kind: {kind!r}")
    moments = np.zeros(dim) if kind == "adam" else None
    return OptimizerState(
        kind=kind,
        learning_rate=learning_rate,
        first_moment=moments,
        second_moment=None if moments is None else moments.copy(),
    )


def optimizer_step(
    state: OptimizerState, theta: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, OptimizerState]:
    """One optimizer update; returns the new parameters and advanced state."""
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    steps = state.step_count + 1
    if state.kind == "sgd":
        new_theta = theta - state.learning_rate * grad
        new_state = replace(state, step_count=steps)
    else:
        b1, b2 = state.adam_beta1, state.adam_beta2
        m = b1 * state.first_moment + (1.0 - b1) * grad
        v = b2 * state.second_moment + (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1**steps)
        v_hat = v / (1.0 - b2**steps)
        new_theta = theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.adam_eps)
        new_state = replace(state, first_moment=m, second_moment=v, step_count=steps)
    return ensure_finite(new_theta, "updated parameters"), new_state
