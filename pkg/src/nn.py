"""
Numerical core
==============

Dense float64 arrays, parameters with gradient slots, and the handful of
differentiable operations the forecasting network needs, each with a
hand-written backward pass:

* ``conv2d`` / ``conv2d_vjp`` - same-padded cross-correlation via im2col
* activations (sigmoid, tanh, relu)
* ``convlstm_step`` / ``convlstm_step_vjp`` - ConvLSTM cell, gates from one
  convolution over the concatenated [x; h]
* ``weighted_softmax_ce`` - class-weighted cross entropy over a 2-class map
* ``finite_diff_check`` - central-difference gradient oracle
* ``Adam`` optimizer

Layer objects keep a LIFO tape of forward caches so one layer can be applied
at every timestep of an unrolled window and then differentiated in reverse.
Arrays use a channel axis at position -3, with an optional leading batch axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.exceptions import (
    MissingCacheError,
    NonDeterministicClosureError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)


# =============================================================================
# PARAMETERS
# =============================================================================

class Parameter:
    """A named float64 value with an accumulated gradient of the same shape."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def uniform_kernel(rng: np.random.Generator, out_channels: int, in_channels: int, k: int) -> np.ndarray:
    """Uniform in +-sqrt(1 / (in_channels * k * k))."""
    bound = np.sqrt(1.0 / (in_channels * k * k))
    return rng.uniform(-bound, bound, size=(out_channels, in_channels, k, k))


# =============================================================================
# ELEMENTWISE
# =============================================================================

def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(z: np.ndarray, axis: int = -3) -> np.ndarray:
    """Max-shifted softmax."""
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -3) -> np.ndarray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


# =============================================================================
# CONVOLUTION
# =============================================================================

@dataclass
class Conv2dCache:
    cols: np.ndarray
    input_shape: Tuple[int, ...]
    kernel: np.ndarray


def _as_batch(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    raise ShapeMismatchError(f"conv2d input must be (C,H,W) or (B,C,H,W), got {x.shape}")


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> Tuple[np.ndarray, Conv2dCache]:
    """
    Same-padded 2-D cross-correlation plus bias.

    Args:
        x: Input (C_in, H, W) or (B, C_in, H, W)
        kernel: (C_out, C_in, k, k) with k odd
        bias: (C_out,)

    Returns:
        (output with x's batch layout and C_out channels, cache for conv2d_vjp)
    """
    x4 = _as_batch(np.asarray(x, dtype=np.float64))
    batch, c_in, height, width = x4.shape
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeMismatchError(f"kernel must be (C_out, C_in, k, k), got {kernel.shape}")
    c_out, k_in, k, _ = kernel.shape
    if k_in != c_in:
        raise ShapeMismatchError(f"kernel expects {k_in} input channels, input has {c_in}")
    if k % 2 == 0:
        raise ShapeMismatchError(f"kernel size must be odd, got {k}")
    if bias.shape != (c_out,):
        raise ShapeMismatchError(f"bias must be ({c_out},), got {bias.shape}")

    pad = k // 2
    padded = np.pad(x4, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    # (B, H, W, C_in, k, k) -> one row per output pixel
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * height * width, c_in * k * k
    )
    out = cols @ kernel.reshape(c_out, -1).T + bias
    out = out.reshape(batch, height, width, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if x.ndim == 3:
        out = out[0]
    return out, Conv2dCache(cols=cols, input_shape=x.shape, kernel=kernel)


def conv2d_vjp(
    grad_out: np.ndarray, cache: Optional[Conv2dCache]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Gradients of conv2d given the upstream gradient.

    Returns:
        (grad_input, grad_kernel, grad_bias)

    Raises:
        MissingCacheError: no forward cache
    """
    if cache is None:
        raise MissingCacheError("conv2d_vjp called without a forward cache")
    kernel = cache.kernel
    c_out, c_in, k, _ = kernel.shape
    x_shape = cache.input_shape if len(cache.input_shape) == 4 else (1,) + tuple(cache.input_shape)
    batch, _, height, width = x_shape
    g4 = _as_batch(np.asarray(grad_out, dtype=np.float64))
    if g4.shape != (batch, c_out, height, width):
        raise ShapeMismatchError(f"upstream gradient {grad_out.shape} does not match the forward output")

    g2 = g4.transpose(0, 2, 3, 1).reshape(batch * height * width, c_out)
    grad_kernel = (g2.T @ cache.cols).reshape(kernel.shape)
    grad_bias = g4.sum(axis=(0, 2, 3))

    d_cols = (g2 @ kernel.reshape(c_out, -1)).reshape(batch, height, width, c_in, k, k)
    pad = k // 2
    d_padded = np.zeros((batch, c_in, height + 2 * pad, width + 2 * pad))
    for i in range(k):
        for j in range(k):
            d_padded[:, :, i:i + height, j:j + width] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_input = d_padded[:, :, pad:pad + height, pad:pad + width]
    if len(cache.input_shape) == 3:
        grad_input = grad_input[0]
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


# =============================================================================
# LAYERS
# =============================================================================

class Layer:
    """Base layer: forward pushes a cache, backward pops the most recent one."""

    def __init__(self):
        self._tape: List[object] = []

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def clear(self) -> None:
        self._tape.clear()

    def _pop(self):
        if not self._tape:
            raise MissingCacheError(f"{type(self).__name__}.backward without a pending forward")
        return self._tape.pop()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


class Conv2d(Layer):
    """Same-padded convolution layer."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        zero_init: bool = False,
    ):
        super().__init__()
        if zero_init:
            weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        else:
            weight = uniform_kernel(rng, out_channels, in_channels, kernel_size)
        self.weight = Parameter(f"{name}.weight", weight)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels))

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, cache = conv2d(x, self.weight.value, self.bias.value)
        self._tape.append(cache)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad_input, grad_kernel, grad_bias = conv2d_vjp(grad, self._pop())
        self.weight.grad += grad_kernel
        self.bias.grad += grad_bias
        return grad_input


class Sigmoid(Layer):
    def forward(self, x):
        out = sigmoid(x)
        self._tape.append(out)
        return out

    def backward(self, grad):
        out = self._pop()
        return grad * out * (1.0 - out)


class Tanh(Layer):
    def forward(self, x):
        out = np.tanh(x)
        self._tape.append(out)
        return out

    def backward(self, grad):
        out = self._pop()
        return grad * (1.0 - out * out)


class ReLU(Layer):
    def forward(self, x):
        self._tape.append(x > 0)
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return grad * self._pop()


ACTIVATIONS = {"relu": ReLU, "tanh": Tanh, "sigmoid": Sigmoid}


def activation(name: str) -> Layer:
    try:
        return ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation: {name}")


# =============================================================================
# CONVLSTM
# =============================================================================

@dataclass
class ConvLstmState:
    """Hidden and cell maps, same shape (..., C_h, H, W)."""

    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ShapeMismatchError(f"h {self.h.shape} and c {self.c.shape} differ")

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "ConvLstmState":
        return cls(h=np.zeros(tuple(shape)), c=np.zeros(tuple(shape)))


@dataclass
class ConvLstmCache:
    conv: Conv2dCache
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c_prev: np.ndarray
    tanh_c: np.ndarray
    x_channels: int


def convlstm_step(
    x: np.ndarray,
    state: ConvLstmState,
    kernel: np.ndarray,
    bias: np.ndarray,
) -> Tuple[np.ndarray, ConvLstmState, ConvLstmCache]:
    """
    One ConvLSTM step.

    Args:
        x: Embedded input (..., C_e, H, W)
        state: Previous (h, c), each (..., C_h, H, W)
        kernel: Gate kernels stacked in order i, f, g, o: (4 C_h, C_e + C_h, k, k)
        bias: (4 C_h,)

    Returns:
        (h', new state, cache for convlstm_step_vjp)
    """
    if x.shape[:-3] != state.h.shape[:-3] or x.shape[-2:] != state.h.shape[-2:]:
        raise ShapeMismatchError(f"input {x.shape} does not line up with state {state.h.shape}")
    hidden = state.h.shape[-3]
    if kernel.shape[0] != 4 * hidden:
        raise ShapeMismatchError(f"gate kernel needs {4 * hidden} output channels, has {kernel.shape[0]}")
    z, conv_cache = conv2d(np.concatenate([x, state.h], axis=-3), kernel, bias)
    z_i, z_f, z_g, z_o = np.split(z, 4, axis=-3)
    i, f, o = sigmoid(z_i), sigmoid(z_f), sigmoid(z_o)
    g = np.tanh(z_g)
    c_new = f * state.c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    cache = ConvLstmCache(conv_cache, i, f, g, o, state.c, tanh_c, x.shape[-3])
    return h_new, ConvLstmState(h=h_new, c=c_new), cache


def convlstm_step_vjp(
    grad_h: np.ndarray,
    grad_c: np.ndarray,
    cache: Optional[ConvLstmCache],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Backward through one ConvLSTM step.

    Args:
        grad_h: dL/dh' from the output and the next step
        grad_c: dL/dc' carried from the next step

    Returns:
        (grad_x, grad_h_prev, grad_c_prev, grad_kernel, grad_bias)
    """
    if cache is None:
        raise MissingCacheError("convlstm_step_vjp called without a forward cache")
    i, f, g, o, tanh_c = cache.i, cache.f, cache.g, cache.o, cache.tanh_c
    grad_o = grad_h * tanh_c
    grad_cell = grad_c + grad_h * o * (1.0 - tanh_c * tanh_c)
    grad_i = grad_cell * g
    grad_g = grad_cell * i
    grad_f = grad_cell * cache.c_prev
    grad_c_prev = grad_cell * f

    grad_z = np.concatenate(
        [
            grad_i * i * (1.0 - i),
            grad_f * f * (1.0 - f),
            grad_g * (1.0 - g * g),
            grad_o * o * (1.0 - o),
        ],
        axis=-3,
    )
    grad_xh, grad_kernel, grad_bias = conv2d_vjp(grad_z, cache.conv)
    grad_x = grad_xh[..., :cache.x_channels, :, :]
    grad_h_prev = grad_xh[..., cache.x_channels:, :, :]
    return grad_x, grad_h_prev, grad_c_prev, grad_kernel, grad_bias


class ConvLSTMCell(Layer):
    """ConvLSTM cell with one kernel Parameter per gate, convolved jointly."""

    GATES = ("i", "f", "g", "o")

    def __init__(self, name: str, in_channels: int, hidden_channels: int, kernel_size: int,
                 rng: np.random.Generator, forget_bias: float = 0.0):
        super().__init__()
        self.hidden_channels = hidden_channels
        fan_in = in_channels + hidden_channels
        self.kernels = [
            Parameter(f"{name}.w_{gate}", uniform_kernel(rng, hidden_channels, fan_in, kernel_size))
            for gate in self.GATES
        ]
        self.biases = [
            Parameter(f"{name}.b_{gate}", np.full(hidden_channels, forget_bias if gate == "f" else 0.0))
            for gate in self.GATES
        ]

    def parameters(self) -> List[Parameter]:
        return self.kernels + self.biases

    def initial_state(self, batch: int, height: int, width: int) -> ConvLstmState:
        return ConvLstmState.zeros((batch, self.hidden_channels, height, width))

    def step(self, x: np.ndarray, state: ConvLstmState) -> Tuple[np.ndarray, ConvLstmState]:
        kernel = np.concatenate([p.value for p in self.kernels], axis=0)
        bias = np.concatenate([p.value for p in self.biases])
        h, new_state, cache = convlstm_step(x, state, kernel, bias)
        self._tape.append(cache)
        return h, new_state

    def backward_step(self, grad_h: np.ndarray, grad_c: np.ndarray):
        """Returns (grad_x, grad_h_prev, grad_c_prev) and accumulates gate gradients."""
        grad_x, grad_h_prev, grad_c_prev, grad_kernel, grad_bias = convlstm_step_vjp(
            grad_h, grad_c, self._pop()
        )
        for param, part in zip(self.kernels, np.split(grad_kernel, 4, axis=0)):
            param.grad += part
        for param, part in zip(self.biases, np.split(grad_bias, 4)):
            param.grad += part
        return grad_x, grad_h_prev, grad_c_prev


# =============================================================================
# LOSS
# =============================================================================

def weighted_softmax_ce(
    logits: np.ndarray,
    labels: np.ndarray,
    valid_mask: np.ndarray,
    class_weights: Tuple[float, float],
) -> Tuple[float, np.ndarray]:
    """
    Class-weighted softmax cross entropy normalized by the total sample weight.

    Args:
        logits: (..., 2, H, W); channel 0 is "no event", channel 1 "event"
        labels: (..., H, W) in {0, 1}
        valid_mask: (..., H, W); masked cells contribute nothing
        class_weights: (w_1, w_2) for labels 0 and 1

    Returns:
        (loss, dloss/dlogits)
    """
    w_quiet, w_event = (float(w) for w in class_weights)
    if w_quiet <= 0 or w_event <= 0:
        raise ValueError("class weights must be > 0")
    labels = np.asarray(labels)
    if logits.shape[-3] != 2 or logits.shape[:-3] + logits.shape[-2:] != labels.shape:
        raise ShapeMismatchError(f"logits {logits.shape} do not match labels {labels.shape}")
    if np.shape(valid_mask) != labels.shape:
        raise ShapeMismatchError("valid mask must match labels in shape")

    positive = labels == 1
    weights = np.where(positive, w_event, w_quiet) * np.asarray(valid_mask, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("every cell is masked; nothing to score")

    log_probs = log_softmax(logits, axis=-3)
    picked = np.where(positive, log_probs[..., 1, :, :], log_probs[..., 0, :, :])
    loss = float(-(weights * picked).sum() / total)

    one_hot = np.stack([~positive, positive], axis=-3).astype(np.float64)
    grad = (np.exp(log_probs) - one_hot) * (weights / total)[..., None, :, :]
    return loss, grad


# =============================================================================
# GRADIENT CHECK
# =============================================================================

def finite_diff_check(
    closure: Callable[[], Tuple[float, Sequence[np.ndarray]]],
    params: Sequence[Parameter],
    h: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """
    Compare analytic gradients with central differences.

    Args:
        closure: Evaluates (loss, gradients aligned with params) at the current values
        params: Parameters perturbed in place (restored afterwards)
        h: Step
        n_coords: Sampled coordinates; all of them when fewer exist
        seed: Sampling seed

    Returns:
        max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)

    Raises:
        NonDeterministicClosureError: two evaluations at the same point differ
    """
    if not h > 0:
        raise ValueError("h must be > 0")
    loss, grads = closure()
    repeat_loss, repeat_grads = closure()
    if loss != repeat_loss or any(not np.array_equal(a, b) for a, b in zip(grads, repeat_grads)):
        raise NonDeterministicClosureError("closure returned different results for the same parameters")

    sizes = [p.value.size for p in params]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    if total <= n_coords:
        coords = np.arange(total)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(total, size=n_coords, replace=False))

    worst = 0.0
    for coord in coords:
        index = int(np.searchsorted(offsets, coord, side="right") - 1)
        flat = int(coord - offsets[index])
        values = params[index].value.reshape(-1)
        original = values[flat]
        values[flat] = original + h
        plus, _ = closure()
        values[flat] = original - h
        minus, _ = closure()
        values[flat] = original
        numeric = (plus - minus) / (2.0 * h)
        analytic = float(np.asarray(grads[index]).reshape(-1)[flat])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    logger.debug("finite-difference check over %d coordinates: %.3e", len(coords), worst)
    return worst


# =============================================================================
# OPTIMIZATION
# =============================================================================

def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most max_norm."""
    norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if norm > max_norm:
        scale = max_norm / norm
        for param in params:
            param.grad *= scale
    return norm


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, params: Sequence[Parameter], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for param, m, v in zip(self.params, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * param.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * param.grad * param.grad
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            param.value -= self.learning_rate * update
