"""Dense-network numerics: parameter layouts, forward/backward kernels, optimizers.

Everything runs in float64. Parameters live in a single flat vector with an
explicit per-layer layout, so gradients coming from different losses can be
added and dotted exactly, and optimizer steps stay bit-reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError, UsageError

Array = np.ndarray

ACTIVATIONS = ("identity", "relu", "sigmoid")


def check_finite(arr: Array, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _act(name: str, z: Array) -> Array:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return expit(z)
    raise ConfigError(f"unknown activation {name!r}")


def _act_deriv(name: str, z: Array, a: Array) -> Array:
    # a is the forward output for z, reused where that is cheaper
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        # subgradient 0 at the kink
        return (z > 0.0).astype(np.float64)
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ConfigError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class LayerSpec:
    """Shape and activation of one dense layer."""

    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


def layout_size(layout: Sequence[LayerSpec]) -> int:
    return sum(spec.n_params for spec in layout)


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus its per-layer layout.

    Values are ordered layer by layer: row-major weight matrix (out x in)
    first, then the bias vector.
    """

    layout: tuple[LayerSpec, ...]
    values: Array

    def __post_init__(self) -> None:
        self.layout = tuple(self.layout)
        if not self.layout:
            raise ConfigError("empty layer layout")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigError("parameter values must form a flat vector")
        need = layout_size(self.layout)
        if self.values.size != need:
            raise ConfigError(f"parameter vector has {self.values.size} values, layout needs {need}")

    @property
    def size(self) -> int:
        return int(self.values.size)

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.values.copy())

    def layers(self) -> list[tuple[Array, Array]]:
        """(weight, bias) views into the flat vector, one pair per layer."""
        return unflatten(self.layout, self.values)


def unflatten(layout: Sequence[LayerSpec], values: Array) -> list[tuple[Array, Array]]:
    """Split a flat vector into per-layer (weight, bias) views, no copies."""
    out = []
    off = 0
    for spec in layout:
        nw = spec.in_dim * spec.out_dim
        w = values[off:off + nw].reshape(spec.out_dim, spec.in_dim)
        off += nw
        b = values[off:off + spec.out_dim]
        off += spec.out_dim
        out.append((w, b))
    if off != values.size:
        raise ConfigError("flat vector does not match layout")
    return out


def flatten(layout: Sequence[LayerSpec], layers: Sequence[tuple[Array, Array]]) -> Array:
    """Inverse of unflatten; validates every weight and bias shape."""
    if len(layers) != len(layout):
        raise ConfigError("layer count does not match layout")
    parts = []
    for spec, (w, b) in zip(layout, layers):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if w.shape != (spec.out_dim, spec.in_dim) or b.shape != (spec.out_dim,):
            raise ConfigError(f"layer tensors do not match spec {spec}")
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def layer_offsets(layout: Sequence[LayerSpec]) -> list[tuple[int, int, int]]:
    """Per layer: (weight start, bias start, end) offsets into the flat vector."""
    out = []
    off = 0
    for spec in layout:
        ws = off
        bs = off + spec.in_dim * spec.out_dim
        off = bs + spec.out_dim
        out.append((ws, bs, off))
    return out


def init_params(layout: Sequence[LayerSpec], rng: np.random.Generator) -> ParamVector:
    """Scaled-normal weight init (variance 2/in_dim for relu, 1/in_dim otherwise), zero biases."""
    parts = []
    for spec in layout:
        gain = 2.0 if spec.activation == "relu" else 1.0
        std = np.sqrt(gain / spec.in_dim)
        parts.append(rng.normal(0.0, std, size=spec.in_dim * spec.out_dim))
        parts.append(np.zeros(spec.out_dim))
    return ParamVector(tuple(layout), np.concatenate(parts))


def _fingerprint(values: Array) -> tuple:
    return (int(values.size), float(values[0]), float(values[-1]), float(values.sum()))


@dataclass
class ForwardTrace:
    """Activations retained by a forward pass, enough for an exact backward.

    `inputs[l]` is what layer l consumed, `preacts[l]` its pre-activation.
    The fingerprint ties the trace to the parameters that produced it.
    """

    layout: tuple[LayerSpec, ...]
    inputs: list[Array]
    preacts: list[Array]
    output: Array
    fingerprint: tuple


def dense_forward(params: ParamVector, batch: Array) -> ForwardTrace:
    """Run a batch through a sequential dense net, retaining state for backward."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ConfigError(f"batch must be 2-d, got shape {batch.shape}")
    if batch.shape[1] != params.layout[0].in_dim:
        raise ConfigError(
            f"batch feature dim {batch.shape[1]} does not match input dim {params.layout[0].in_dim}"
        )
    for prev, nxt in zip(params.layout, params.layout[1:]):
        if prev.out_dim != nxt.in_dim:
            raise ConfigError("layer dims do not chain")
    inputs, preacts = [], []
    a = batch
    for spec, (w, b) in zip(params.layout, params.layers()):
        inputs.append(a)
        z = a @ w.T + b
        preacts.append(z)
        a = _act(spec.activation, z)
    check_finite(a, "forward output")
    return ForwardTrace(params.layout, inputs, preacts, a, _fingerprint(params.values))


def _check_trace(params: ParamVector, trace: ForwardTrace) -> None:
    if trace.layout != params.layout or trace.fingerprint != _fingerprint(params.values):
        raise UsageError("forward trace is stale: it was produced by different parameters")


def dense_backward(params: ParamVector, trace: ForwardTrace, upstream: Array) -> tuple[Array, Array]:
    """Backward pass through a retained forward.

    Args:
        upstream: dLoss/doutput, same shape as trace.output.

    Returns:
        (flat parameter gradient, dLoss/dinput for the batch).
    """
    _check_trace(params, trace)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.output.shape:
        raise ConfigError(f"upstream shape {upstream.shape} != output shape {trace.output.shape}")
    layers = params.layers()
    n_layers = len(layers)
    grads: list[Array | None] = [None] * n_layers
    delta = upstream
    for l in range(n_layers - 1, -1, -1):
        spec = params.layout[l]
        a_out = trace.inputs[l + 1] if l + 1 < n_layers else trace.output
        dz = delta * _act_deriv(spec.activation, trace.preacts[l], a_out)
        dw = dz.T @ trace.inputs[l]
        db = dz.sum(axis=0)
        grads[l] = np.concatenate([dw.ravel(), db])
        delta = dz @ layers[l][0]
    flat = np.concatenate(grads)  # type: ignore[arg-type]
    check_finite(flat, "parameter gradient")
    return flat, delta


def per_sample_gradients(params: ParamVector, trace: ForwardTrace, upstream: Array) -> Array:
    """Like dense_backward but keeps each sample's contribution separate.

    Returns a [batch, n_params] matrix; its column sums equal dense_backward.
    """
    _check_trace(params, trace)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.output.shape:
        raise ConfigError(f"upstream shape {upstream.shape} != output shape {trace.output.shape}")
    layers = params.layers()
    n_layers = len(layers)
    batch = upstream.shape[0]
    blocks: list[Array | None] = [None] * n_layers
    delta = upstream
    for l in range(n_layers - 1, -1, -1):
        spec = params.layout[l]
        a_out = trace.inputs[l + 1] if l + 1 < n_layers else trace.output
        dz = delta * _act_deriv(spec.activation, trace.preacts[l], a_out)
        dw = np.einsum("bo,bi->boi", dz, trace.inputs[l]).reshape(batch, -1)
        blocks[l] = np.concatenate([dw, dz], axis=1)
        delta = dz @ layers[l][0]
    out = np.concatenate(blocks, axis=1)  # type: ignore[arg-type]
    check_finite(out, "per-sample gradients")
    return out


def per_sample_gradient(params: ParamVector, sample: Array, loss_grad: Callable[[Array], Array]) -> Array:
    """Flat parameter gradient of a scalar loss on a single sample.

    `loss_grad` maps the network output row to dLoss/doutput for that row.
    Equals dense_backward run on a batch of one.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 1:
        raise ConfigError("per_sample_gradient expects a single feature vector")
    trace = dense_forward(params, sample[None, :])
    up = np.asarray(loss_grad(trace.output[0]), dtype=np.float64)
    grad, _ = dense_backward(params, trace, up[None, :])
    return grad


def sgd_step(params: ParamVector, grad: Array, lr: float) -> ParamVector:
    """One plain gradient-descent step; lr = 0 returns the parameters unchanged."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ConfigError("gradient shape does not match parameters")
    if lr < 0.0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    check_finite(grad, "sgd gradient")
    out = ParamVector(params.layout, params.values - lr * grad)
    check_finite(out.values, "sgd result")
    return out


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: Array
    v: Array
    t: int = 0


def init_adam(n_params: int) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params), 0)


def adam_step(
    state: AdamState,
    params: ParamVector,
    grad: Array,
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[ParamVector, AdamState]:
    """One Adam step with bias correction; decoupled l2 is folded into the gradient.

    Returns fresh (params, state); the inputs are left untouched.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ConfigError("gradient shape does not match parameters")
    if state.m.shape != params.values.shape:
        raise ConfigError("adam state shape does not match parameters")
    check_finite(grad, "adam gradient")
    g = grad + weight_decay * params.values
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_values = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    check_finite(new_values, "adam result")
    return ParamVector(params.layout, new_values), AdamState(m, v, t)
