"""Dense-network primitives shared by the encoder and decoder.

Arrays are plain numpy arrays. Parameters and activations are float32; losses
are accumulated in float64. Every function that takes an input vector also
accepts a 2-D batch with one example per row.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_ONE_BELOW_F32 = np.nextafter(np.float32(1.0), np.float32(0.0))
_CHUNK = 1 << 20


def mix64(z: int) -> int:
    """splitmix64 output finalizer on a 64-bit integer."""
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _unit_f32(bits53) -> np.ndarray:
    out = (np.asarray(bits53, dtype=np.float64) * 2.0**-53).astype(np.float32)
    # round-to-nearest can land on 1.0; keep the half-open interval
    return np.minimum(out, _ONE_BELOW_F32)


class DeterministicRng:
    """splitmix64 generator; the same seed gives the same stream everywhere."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    @classmethod
    def derived(cls, seed: int, *keys: int) -> "DeterministicRng":
        """Independent stream for ``(seed, key1, key2, ...)``, e.g. one per epoch."""
        state = mix64((int(seed) + GOLDEN_GAMMA) & MASK64)
        for key in keys:
            state = mix64(((state ^ (int(key) & MASK64)) + GOLDEN_GAMMA) & MASK64)
        return cls(state)

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def next_uniform(self) -> np.float32:
        return _unit_f32(self.next_u64() >> 11)[()]

    def uniform(self, shape) -> np.ndarray:
        """float32 array of draws in [0, 1), filled row-major.

        Consumes exactly the draws ``next_uniform`` would, in the same order.
        """
        count = int(np.prod(shape, dtype=np.int64))
        out = np.empty(count, dtype=np.float32)
        gamma = np.uint64(GOLDEN_GAMMA)
        start = 0
        while start < count:
            k = min(count - start, _CHUNK)
            steps = np.arange(1, k + 1, dtype=np.uint64)
            z = _mix64_array(np.uint64(self.state) + steps * gamma)
            out[start:start + k] = _unit_f32(z >> np.uint64(11))
            self.state = (self.state + k * GOLDEN_GAMMA) & MASK64
            start += k
        return out.reshape(shape)

    def below(self, bound: int) -> int:
        return self.next_u64() % bound

    def permutation(self, m: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(m)``."""
        order = list(range(m))
        for i in range(m - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return np.array(order, dtype=np.int64)


class Kind(enum.IntEnum):
    # values double as the on-disk activation codes
    IDENTITY = 0
    RELU = 1
    LEAKY_RELU = 2
    SIGMOID = 3


@dataclass(frozen=True)
class Activation:
    kind: Kind
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind == Kind.LEAKY_RELU and not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"LeakyRelu alpha must be in [0, 1), got {self.alpha}")


IDENTITY = Activation(Kind.IDENTITY)
RELU = Activation(Kind.RELU)
SIGMOID = Activation(Kind.SIGMOID)


def leaky_relu(alpha: float) -> Activation:
    return Activation(Kind.LEAKY_RELU, float(np.float32(alpha)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch-free stable form: exp only ever sees nonpositive arguments
    e = np.exp(-np.abs(z))
    one = z.dtype.type(1)
    out = np.where(z >= 0, one, e) / (one + e)
    info = np.finfo(z.dtype)
    # saturation would otherwise round onto the closed endpoints
    return np.clip(out, info.tiny, one - info.epsneg, out=out)


def activation_apply(act: Activation, v: np.ndarray) -> np.ndarray:
    z = np.asarray(v)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float32)
    if act.kind == Kind.IDENTITY:
        return z.copy()
    if act.kind == Kind.RELU:
        return np.maximum(z, 0).astype(z.dtype)
    if act.kind == Kind.LEAKY_RELU:
        return np.where(z >= 0, z, z * z.dtype.type(act.alpha))
    return _sigmoid(z)


def activation_grad(act: Activation, pre_activation: np.ndarray,
                    output: Optional[np.ndarray] = None) -> np.ndarray:
    """Elementwise derivative, evaluated at the value fed into the activation.

    ``output`` may pass the already computed activation so Sigmoid can use s(1-s)
    without re-evaluating.
    """
    z = np.asarray(pre_activation)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float32)
    one = z.dtype.type(1)
    if act.kind == Kind.IDENTITY:
        return np.ones_like(z)
    if act.kind == Kind.RELU:
        return np.where(z > 0, one, z.dtype.type(0))
    if act.kind == Kind.LEAKY_RELU:
        return np.where(z > 0, one, z.dtype.type(act.alpha))
    s = _sigmoid(z) if output is None else output
    return s * (one - s)


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out_units, in_units)
    bias: np.ndarray  # (out_units,)
    activation: Activation

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias of shape {self.bias.shape} does not match weights {self.weights.shape}"
            )

    @property
    def in_units(self) -> int:
        return self.weights.shape[1]

    @property
    def out_units(self) -> int:
        return self.weights.shape[0]

    @property
    def param_count(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)

    def astype(self, dtype) -> "DenseLayer":
        return DenseLayer(self.weights.astype(dtype), self.bias.astype(dtype), self.activation)


def glorot_layer(rng: DeterministicRng, in_units: int, out_units: int,
                 activation: Activation) -> DenseLayer:
    """Weights uniform in (-L, L), L = sqrt(6 / (fan_in + fan_out)); zero bias.

    Draws are row-major over the (out, in) weight matrix. Biases take no draws.
    """
    limit = math.sqrt(6.0 / (in_units + out_units))
    u = rng.uniform((out_units, in_units)).astype(np.float64)
    weights = ((2.0 * u - 1.0) * limit).astype(np.float32)
    return DenseLayer(weights, np.zeros(out_units, dtype=np.float32), activation)


def dense_forward(layer: DenseLayer, x: np.ndarray):
    """Return ``(pre, out)`` with ``pre = W x + b`` and ``out = act(pre)``."""
    x = np.asarray(x)
    if x.ndim not in (1, 2) or x.shape[-1] != layer.in_units:
        raise ShapeError(
            f"dense layer expects input length {layer.in_units}, got shape {x.shape}"
        )
    pre = x @ layer.weights.T + layer.bias
    return pre, activation_apply(layer.activation, pre)


def dropout_forward(rate: float, v: np.ndarray, training: bool,
                    rng: Optional[DeterministicRng]):
    """Inverted dropout. Returns ``(out, mask)`` where ``out = v * mask``.

    Survivors carry the 1/(1-rate) factor in the mask. Rate 0 and inference
    mode draw nothing from ``rng``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    v = np.asarray(v)
    if not training or rate == 0.0:
        return v.copy(), np.ones_like(v)
    keep = rng.uniform(v.shape) >= np.float32(rate)
    mask = keep.astype(v.dtype) / v.dtype.type(1.0 - rate)
    return v * mask, mask


def mse_loss(predicted: np.ndarray, target: np.ndarray) -> float:
    predicted = np.asarray(predicted)
    target = np.asarray(target)
    if predicted.shape != target.shape:
        raise ShapeError(f"mse: prediction shape {predicted.shape} != target shape {target.shape}")
    diff = predicted.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(diff * diff))


@dataclass
class GradientSet:
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __len__(self):
        return len(self.weights)


@dataclass
class ForwardCache:
    inputs: list  # what each layer received
    pres: list
    acts: list  # activation outputs, before dropout
    masks: list  # per layer; None where no dropout follows the layer
    output: np.ndarray


def forward(layers: Sequence[DenseLayer], x: np.ndarray,
            masks: Optional[Sequence[Optional[np.ndarray]]] = None) -> ForwardCache:
    """Forward pass with fixed dropout masks applied after each activation."""
    if masks is None:
        masks = [None] * len(layers)
    if len(masks) != len(layers):
        raise ShapeError(f"{len(masks)} masks for {len(layers)} layers")
    inputs, pres, acts = [], [], []
    h = np.asarray(x)
    for layer, mask in zip(layers, masks):
        inputs.append(h)
        pre, h = dense_forward(layer, h)
        acts.append(h)
        if mask is not None:
            if mask.shape != h.shape:
                raise ShapeError(f"mask shape {mask.shape} != activation shape {h.shape}")
            h = h * mask
        pres.append(pre)
    return ForwardCache(inputs, pres, acts, list(masks), h)


def backward(layers: Sequence[DenseLayer], cache: ForwardCache, target: np.ndarray):
    """Reverse-mode gradients of the mean squared error for a cached forward pass.

    For a batch, the gradient is the mean of the per-example gradients.
    """
    y = cache.output
    target = np.asarray(target)
    loss = mse_loss(y, target)
    batch = y.shape[0] if y.ndim == 2 else 1
    delta = (y - target.astype(y.dtype)) * y.dtype.type(2.0 / (y.shape[-1] * batch))
    grads_w, grads_b = [None] * len(layers), [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        if cache.masks[i] is not None:
            delta = delta * cache.masks[i]
        delta = delta * activation_grad(layer.activation, cache.pres[i], cache.acts[i])
        x = cache.inputs[i]
        if delta.ndim == 2:
            grads_w[i] = delta.T @ x
            grads_b[i] = delta.sum(axis=0)
        else:
            grads_w[i] = np.outer(delta, x)
            grads_b[i] = delta.copy()
        if i > 0:
            delta = delta @ layer.weights
    return loss, GradientSet(grads_w, grads_b)


def backprop(layers: Sequence[DenseLayer], x: np.ndarray, target: np.ndarray,
             dropout_masks: Optional[Sequence[Optional[np.ndarray]]] = None):
    """``(loss, grads)`` of the mean squared error w.r.t. every weight and bias."""
    return backward(layers, forward(layers, x, dropout_masks), target)


def sgd_step(layers: Sequence[DenseLayer], grads: GradientSet, learning_rate: float):
    """Plain SGD, in place: ``p <- p - learning_rate * grad(p)``."""
    if len(grads) != len(layers):
        raise ShapeError(f"{len(grads)} gradients for {len(layers)} layers")
    for layer, gw, gb in zip(layers, grads.weights, grads.biases):
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise ShapeError(
                f"gradient shapes {gw.shape}/{gb.shape} do not match layer "
                f"{layer.weights.shape}/{layer.bias.shape}"
            )
        lr = layer.weights.dtype.type(learning_rate)
        layer.weights -= lr * gw.astype(layer.weights.dtype, copy=False)
        layer.bias -= lr * gb.astype(layer.bias.dtype, copy=False)
    return layers


def copy_layers(layers: Sequence[DenseLayer]) -> list:
    return [layer.copy() for layer in layers]
