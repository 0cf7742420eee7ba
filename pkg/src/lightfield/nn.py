"""MLP forward/backward, parameter packing, positional encoding and Adam.

A network is a flat float vector plus an :class:`MlpSpec` describing how to
carve it into per-layer weights.  The same forward runs in three modes:

* plain float32 inference through :mod:`lightfield.kernels` (the hot path
  behind rendering; compiled kernel when available),
* plain float64 for shadow-mode numerics,
* recorded on a :class:`~lightfield.autodiff.Tape` for gradients with
  respect to parameters and inputs.

Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
Hidden pre-activations get layer normalization (when enabled) followed by
ReLU; the output layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import LAYER_NORM_EPS, Tape, Var


class TrainingError(RuntimeError):
    """Raised when optimization hits non-finite numbers."""


@dataclass(frozen=True)
class MlpSpec:
    """Shape of an MLP: ``num_layers`` linear layers, ReLU hidden units.

    ``input_dim`` is the raw input width; positional encoding (when
    ``positional_encoding_frequencies > 0``) expands it to
    ``input_dim * (1 + 2 * F)`` before the first layer.
    """

    input_dim: int
    hidden_dim: int
    output_dim: int
    num_layers: int
    layer_norm: bool = True
    positional_encoding_frequencies: int = 0

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.output_dim) <= 0:
            raise ValueError("dimensions must be positive")
        if self.num_layers < 2:
            raise ValueError("need at least 2 layers")
        if self.positional_encoding_frequencies < 0:
            raise ValueError("positional encoding frequencies must be >= 0")

    @property
    def encoded_input_dim(self) -> int:
        return self.input_dim * (1 + 2 * self.positional_encoding_frequencies)

    @property
    def layer_dims(self):
        return (
            [self.encoded_input_dim]
            + [self.hidden_dim] * (self.num_layers - 1)
            + [self.output_dim]
        )

    def param_count(self) -> int:
        dims = self.layer_dims
        count = 0
        for i in range(self.num_layers):
            count += dims[i] * dims[i + 1] + dims[i + 1]
            if self.layer_norm and i < self.num_layers - 1:
                count += 2 * dims[i + 1]
        return count


def init_params(spec: MlpSpec, rng: np.random.Generator, dtype=np.float32):
    """Fan-in uniform init: ``W ~ U(+-sqrt(6 / fan_in))``, biases zero,
    layer-norm gains one."""
    dims = spec.layer_dims
    chunks = []
    for i in range(spec.num_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
        if spec.layer_norm and i < spec.num_layers - 1:
            chunks.append(np.ones(fan_out))
            chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks).astype(dtype)


def unpack_params(spec: MlpSpec, params: np.ndarray):
    """Carve the flat vector into per-layer ``(W, b, gain, ln_bias)`` views.

    Raises on length mismatch: the consumed slices must sum to the declared
    parameter count exactly.
    """
    if params.ndim != 1:
        raise ValueError("parameter vector must be flat")
    if len(params) != spec.param_count():
        raise ValueError(
            f"parameter vector has {len(params)} entries, spec needs {spec.param_count()}"
        )
    dims = spec.layer_dims
    layers = []
    offset = 0
    for i in range(spec.num_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        W = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        gain = ln_bias = None
        if spec.layer_norm and i < spec.num_layers - 1:
            gain = params[offset : offset + fan_out]
            offset += fan_out
            ln_bias = params[offset : offset + fan_out]
            offset += fan_out
        layers.append((W, b, gain, ln_bias))
    assert offset == spec.param_count()
    return layers


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS):
    """Normalize over the last axis: ``(x - mean) / sqrt(var + eps) * gain + bias``."""
    x = np.asarray(x)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + np.asarray(eps, dtype=x.dtype)) * gain + bias


def positional_encode(x, num_freqs: int):
    """Concatenate ``x`` with ``sin(2^k pi x), cos(2^k pi x)`` for
    ``k = 0 .. num_freqs - 1``; identity for ``num_freqs == 0``."""
    x = np.asarray(x)
    if num_freqs == 0:
        return x
    parts = [x]
    for k in range(num_freqs):
        scaled = (2.0**k * np.pi) * x
        parts.append(np.sin(scaled).astype(x.dtype, copy=False))
        parts.append(np.cos(scaled).astype(x.dtype, copy=False))
    return np.concatenate(parts, axis=-1)


def _positional_encode_tape(tape: Tape, x: Var, num_freqs: int) -> Var:
    if num_freqs == 0:
        return x
    parts = [x]
    for k in range(num_freqs):
        scaled = tape.scale(x, 2.0**k * np.pi)
        parts.append(tape.sin(scaled))
        parts.append(tape.cos(scaled))
    return tape.concat(parts, axis=-1)


def mlp_forward(spec: MlpSpec, params, inputs, tape: Tape | None = None):
    """Run the MLP on a ``(batch, input_dim)`` array.

    Without a tape this is a plain forward (float32 batches go through the
    selected kernel).  With a tape, ``params`` and ``inputs`` may be tape
    variables or arrays, and the pass is recorded for ``backward``.
    """
    if tape is None:
        return _forward_plain(spec, params, inputs)
    return _forward_tape(spec, params, inputs, tape)


def _check_input(spec: MlpSpec, inputs):
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise ValueError(
            f"inputs must be (batch, {spec.input_dim}), got {inputs.shape}"
        )


def _forward_plain(spec: MlpSpec, params: np.ndarray, inputs: np.ndarray):
    _check_input(spec, inputs)
    layers = unpack_params(spec, params)
    x = positional_encode(inputs.astype(params.dtype, copy=False),
                          spec.positional_encoding_frequencies)
    x = np.ascontiguousarray(x)
    if params.dtype == np.float32:
        return kernels.mlp_forward_f32(x, layers, spec.layer_norm)
    return kernels.mlp_forward_numpy(x, layers, spec.layer_norm)


def _forward_tape(spec: MlpSpec, params, inputs, tape: Tape):
    params = tape._as_var(params)
    inputs = tape._as_var(inputs)
    _check_input(spec, inputs.value)
    if params.value.shape != (spec.param_count(),):
        raise ValueError(
            f"parameter vector has shape {params.value.shape}, "
            f"spec needs ({spec.param_count()},)"
        )
    dims = spec.layer_dims
    h = _positional_encode_tape(tape, inputs, spec.positional_encoding_frequencies)
    offset = 0
    for i in range(spec.num_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        W = tape.narrow(params, offset, fan_in * fan_out, (fan_in, fan_out))
        offset += fan_in * fan_out
        b = tape.narrow(params, offset, fan_out)
        offset += fan_out
        z = tape.add(tape.matmul(h, W), b)
        if i < spec.num_layers - 1:
            if spec.layer_norm:
                gain = tape.narrow(params, offset, fan_out)
                offset += fan_out
                ln_bias = tape.narrow(params, offset, fan_out)
                offset += fan_out
                z = tape.layer_norm(z, gain, ln_bias)
            h = tape.relu(z)
        else:
            h = z
    return h


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    _scratch: np.ndarray | None = None

    @classmethod
    def like(cls, params: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(params), v=np.zeros_like(params))

    def scratch(self):
        if self._scratch is None:
            self._scratch = np.empty_like(self.m)
        return self._scratch


def adam_step(params, grads, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999,
              eps=1e-8):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``.

    Uses the folded form ``params -= lr/bc1 * m / (sqrt(v)/sqrt(bc2) + eps)``
    (identical to the textbook m-hat/v-hat update) with a reused scratch
    buffer, since this runs per step on multi-million-entry vectors.
    """
    grads = np.asarray(grads)
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise TrainingError(
            f"non-finite gradient at index {bad} "
            f"(|g| max = {np.abs(grads[np.isfinite(grads)]).max(initial=0.0):.3g})"
        )
    state.step += 1
    scratch = state.scratch()
    state.m *= beta1
    np.multiply(grads, 1.0 - beta1, out=scratch)
    state.m += scratch
    state.v *= beta2
    np.multiply(grads, grads, out=scratch)
    scratch *= 1.0 - beta2
    state.v += scratch
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    np.sqrt(state.v, out=scratch)
    scratch /= np.sqrt(bc2)
    scratch += eps
    np.divide(state.m, scratch, out=scratch)
    scratch *= lr / bc1
    params -= scratch
    return params, state
