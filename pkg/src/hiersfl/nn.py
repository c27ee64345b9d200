"""Dense neural network core: forward/backward passes and momentum SGD.

Parameters live in a single flat float64 vector (``ParamVector``) so that the
protocols can average, clip and perturb whole models with vector arithmetic.
Per layer the layout is the weight matrix (``in x out``, row-major) followed
by the bias vector (``out``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractViolation, InputError, NumericError

RELU = "relu"
SOFTMAX = "softmax"
_ACTIVATIONS = (RELU, SOFTMAX)

# Clamp used when taking logs of probabilities.
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Layer:
    in_dim: int
    out_dim: int
    activation: str = RELU

    @property
    def num_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True)
class LayerStack:
    """Ordered dense layers. Softmax may only appear on the last layer."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise InputError("layer stack is empty")
        for i, layer in enumerate(self.layers):
            if layer.in_dim < 1 or layer.out_dim < 1:
                raise InputError(f"layer {i} has non-positive dims")
            if layer.activation not in _ACTIVATIONS:
                raise InputError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.activation == SOFTMAX and i != len(self.layers) - 1:
                raise InputError(f"layer {i}: softmax is only allowed on the output layer")
        for i in range(len(self.layers) - 1):
            if self.layers[i].out_dim != self.layers[i + 1].in_dim:
                raise InputError(
                    f"layer {i} out_dim {self.layers[i].out_dim} does not chain into "
                    f"layer {i + 1} in_dim {self.layers[i + 1].in_dim}"
                )

    @classmethod
    def from_dims(cls, dims: Sequence[int]) -> "LayerStack":
        """Classifier stack: ReLU hidden layers and a softmax output layer."""
        dims = [int(d) for d in dims]
        if len(dims) < 2:
            raise InputError("need at least input and output dims")
        layers = [Layer(dims[i], dims[i + 1], RELU) for i in range(len(dims) - 2)]
        layers.append(Layer(dims[-2], dims[-1], SOFTMAX))
        return cls(tuple(layers))

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return LayerStack(self.layers[item])
        return self.layers[item]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0].in_dim,) + tuple(layer.out_dim for layer in self.layers)

    @property
    def shapes(self) -> tuple[tuple[str, int, int], ...]:
        return tuple(("dense", layer.in_dim, layer.out_dim) for layer in self.layers)

    @property
    def num_params(self) -> int:
        return sum(layer.num_params for layer in self.layers)

    @property
    def is_classifier(self) -> bool:
        return self.layers[-1].activation == SOFTMAX


def _count(shapes) -> int:
    return sum(i * o + o for _, i, o in shapes)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat model parameters plus the per-layer shapes that give them meaning."""

    values: np.ndarray
    shapes: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ContractViolation("parameter values must be a 1-D vector")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "shapes", tuple(tuple(s) for s in self.shapes))
        expected = _count(self.shapes)
        if values.size != expected:
            raise ContractViolation(
                f"parameter vector has {values.size} values, shapes require {expected}"
            )

    def __len__(self) -> int:
        return self.values.size

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.shapes)

    def compatible(self, other: "ParamVector") -> bool:
        return self.shapes == other.shapes

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weight, bias) views per layer."""
        out = []
        offset = 0
        for _, n_in, n_out in self.shapes:
            w = self.values[offset : offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            b = self.values[offset : offset + n_out]
            offset += n_out
            out.append((w, b))
        return out

    def bias_mask(self) -> np.ndarray:
        mask = np.zeros(self.values.size, dtype=bool)
        offset = 0
        for _, n_in, n_out in self.shapes:
            offset += n_in * n_out
            mask[offset : offset + n_out] = True
            offset += n_out
        return mask

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.shapes)

    def equals(self, other: "ParamVector") -> bool:
        return self.shapes == other.shapes and np.array_equal(self.values, other.values)

    @classmethod
    def flat(cls, values) -> "ParamVector":
        """A bare vector with no layer structure (a single bias-only block)."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values, (("flat", 0, values.size),))

    @classmethod
    def zeros(cls, shapes) -> "ParamVector":
        shapes = tuple(tuple(s) for s in shapes)
        return cls(np.zeros(_count(shapes)), shapes)

    @classmethod
    def concat(cls, parts: Sequence["ParamVector"]) -> "ParamVector":
        shapes = tuple(s for p in parts for s in p.shapes)
        return cls(np.concatenate([p.values for p in parts]), shapes)


def _check_params(stack: LayerStack, params: ParamVector) -> None:
    if params.shapes != stack.shapes:
        for i, (have, want) in enumerate(zip(params.shapes, stack.shapes)):
            if have != want:
                raise ContractViolation(f"layer {i}: params shaped {have}, stack expects {want}")
        raise ContractViolation(
            f"params cover {len(params.shapes)} layers, stack has {len(stack.shapes)}"
        )


def _as_batch(batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ContractViolation(f"batch must be 2-D, got shape {x.shape}")
    return x


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(stack: LayerStack, params: ParamVector, batch) -> tuple[list[np.ndarray], np.ndarray]:
    """Run the stack on ``batch``.

    Returns the activation cache ``[input, out_0, ..., out_{L-1}]`` and the
    final output (softmax probabilities for a classifier stack).
    """
    _check_params(stack, params)
    x = _as_batch(batch)
    acts = [x]
    for i, (layer, (w, b)) in enumerate(zip(stack.layers, params.layers())):
        if x.shape[1] != layer.in_dim:
            raise ContractViolation(
                f"layer {i}: input has {x.shape[1]} columns, expected {layer.in_dim}"
            )
        z = x @ w + b
        x = softmax(z) if layer.activation == SOFTMAX else np.maximum(z, 0.0)
        acts.append(x)
    return acts, x


def _labels(labels, n_rows: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n_rows:
        raise ContractViolation(f"expected {n_rows} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InputError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InputError(f"label out of range [0, {num_classes})")
    return y


def loss_cross_entropy(predictions, labels) -> float:
    """Mean negative log-likelihood of the true classes."""
    p = _as_batch(predictions)
    y = _labels(labels, p.shape[0], p.shape[1])
    picked = p[np.arange(p.shape[0]), y]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def _backprop(stack: LayerStack, params: ParamVector, acts: list[np.ndarray], delta: np.ndarray,
              need_input_grad: bool = True):
    """Walk the layers top-down given dL/dz of the last layer.

    Returns (flat gradient, dL/d input); the latter is None when not requested.
    """
    pieces: list[np.ndarray] = []
    layer_params = params.layers()
    for i in range(len(stack) - 1, -1, -1):
        w, _ = layer_params[i]
        a_in = acts[i]
        pieces.append(np.concatenate([(a_in.T @ delta).ravel(), delta.sum(axis=0)]))
        if i == 0 and not need_input_grad:
            d_in = None
            break
        d_in = delta @ w.T
        if i > 0:
            # Upstream layer is ReLU; its output is acts[i].
            delta = d_in * (acts[i] > 0)
    pieces.reverse()
    return ParamVector(np.concatenate(pieces), params.shapes), d_in


def _check_cache(stack: LayerStack, acts) -> None:
    if acts is None or len(acts) != len(stack) + 1:
        raise ContractViolation("activation cache is missing or from a different stack")
    for i, layer in enumerate(stack.layers):
        if acts[i].ndim != 2 or acts[i].shape[1] != layer.in_dim or acts[i + 1].shape[1] != layer.out_dim:
            raise ContractViolation(f"layer {i}: cached activations do not match the stack")
        if acts[i + 1].shape[0] != acts[0].shape[0]:
            raise ContractViolation(f"layer {i}: cached activations have inconsistent rows")


def backward_with_input_grad(stack: LayerStack, params: ParamVector, activations, labels):
    """Cross-entropy gradient w.r.t. params and w.r.t. the stack input."""
    return _classifier_backprop(stack, params, activations, labels, need_input_grad=True)


def _classifier_backprop(stack, params, activations, labels, need_input_grad):
    if not stack.is_classifier:
        raise ContractViolation("backward needs a softmax output layer")
    _check_params(stack, params)
    _check_cache(stack, activations)
    probs = activations[-1]
    n = probs.shape[0]
    y = _labels(labels, n, probs.shape[1])
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return _backprop(stack, params, activations, delta, need_input_grad)


def backward(stack: LayerStack, params: ParamVector, activations, labels) -> ParamVector:
    """Gradient of the mean cross-entropy loss w.r.t. ``params``."""
    grad, _ = _classifier_backprop(stack, params, activations, labels, need_input_grad=False)
    return grad


def backward_from_cut(stack: LayerStack, params: ParamVector, cut_gradient, activations) -> ParamVector:
    """Backprop through a client prefix, seeded by dL/d(prefix output)."""
    _check_params(stack, params)
    _check_cache(stack, activations)
    g = np.asarray(cut_gradient, dtype=np.float64)
    out = activations[-1]
    if g.shape != out.shape:
        raise ContractViolation(f"cut gradient shape {g.shape} != cut activation shape {out.shape}")
    if stack.layers[-1].activation == SOFTMAX:
        raise ContractViolation("backward_from_cut expects a prefix without the softmax layer")
    grad, _ = _backprop(stack, params, activations, g * (out > 0), need_input_grad=False)
    return grad


@dataclass
class OptimizerState:
    """Momentum SGD with per-epoch exponential learning-rate decay."""

    learning_rate: float = 0.01
    decay: float = 0.995
    momentum: float = 0.5
    velocity: np.ndarray | None = field(default=None, repr=False)
    epoch_counter: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be > 0")
        if not 0 < self.decay <= 1:
            raise InputError("decay must be in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must be in [0, 1)")

    @property
    def effective_rate(self) -> float:
        return self.learning_rate * self.decay**self.epoch_counter

    def end_epoch(self) -> None:
        self.epoch_counter += 1

    def reset_velocity(self) -> None:
        self.velocity = None


def sgd_step(params: ParamVector, gradient: ParamVector, opt: OptimizerState) -> ParamVector:
    """One momentum step; updates ``opt.velocity`` and returns new params."""
    if not params.compatible(gradient):
        raise ContractViolation("gradient shapes do not match params")
    g = gradient.values
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient at optimizer epoch {opt.epoch_counter}")
    if opt.velocity is None or opt.velocity.shape != g.shape:
        velocity = g.copy()
    else:
        velocity = opt.momentum * opt.velocity + g
    opt.velocity = velocity
    return params.with_values(params.values - opt.effective_rate * velocity)


def init_params(stack: LayerStack, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    pieces = []
    for layer in stack.layers:
        limit = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        pieces.append(rng.uniform(-limit, limit, size=layer.in_dim * layer.out_dim))
        pieces.append(np.zeros(layer.out_dim))
    return ParamVector(np.concatenate(pieces), stack.shapes)
