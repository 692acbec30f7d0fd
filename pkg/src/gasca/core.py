"""Numeric substrate: seeded randomness, parameters and hand-written layers.

Tensors are plain float64 numpy arrays in NCHW layout. Every layer caches
what it needs during ``forward`` and accumulates parameter gradients during
``backward``; there is no autograd graph.

Convolution is cross-correlation (no kernel flip):

    y[n, o, i, j] = sum_{c, p, q} xpad[n, c, i*s + p, j*s + q] * w[o, c, p, q] + b[o]

    H_out = (H + 2*pad - K) // s + 1

The transposed convolution is the exact adjoint of the map above, with
weights laid out as (C_in, C_out, K, K) and H_out = (H - 1)*s - 2*pad + K.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class SeededRng:
    """PCG64 stream keyed by a 64-bit seed; state is serializable."""

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=DTYPE)


@dataclass
class Parameter:
    value: Tensor
    grad: Tensor = None
    m: Tensor = None
    v: Tensor = None
    step: int = 0

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: SeededRng) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _check_conv_args(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected 4-d input and weights, got input {x.shape} and weights {w.shape}")
    if stride < 1 or padding < 0 or w.shape[2] < 1:
        raise ShapeError(f"invalid stride={stride} padding={padding} for weights {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"only square kernels are supported, got weights {w.shape}")


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp, k, stride, h_out, w_out):
    # (N, C, h_out, w_out, k, k) view, no copy
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (h_out - 1) * stride + 1 : stride, : (w_out - 1) * stride + 1 : stride]


def _scatter_windows(cols, out_shape, stride, h_in, w_in):
    """Adjoint of ``_windows``: add (N, C, h_in, w_in, k, k) patches into a canvas."""
    k = cols.shape[-1]
    canvas = np.zeros(out_shape, dtype=DTYPE)
    for p in range(k):
        for q in range(k):
            canvas[:, :, p : p + stride * (h_in - 1) + 1 : stride, q : q + stride * (w_in - 1) + 1 : stride] += cols[..., p, q]
    return canvas


def conv2d_forward(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    _check_conv_args(x, w, stride, padding)
    n, c, h, wd = x.shape
    c_out, c_in, k, _ = w.shape
    if c != c_in:
        raise ShapeError(f"input {x.shape} has {c} channels but weights {w.shape} expect {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"bias {b.shape} does not match weights {w.shape}")
    h_out = conv_output_size(h, k, stride, padding)
    w_out = conv_output_size(wd, k, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"zero-sized output for input {x.shape} and weights {w.shape} (stride={stride}, padding={padding})")
    win = _windows(_pad(x, padding), k, stride, h_out, w_out)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, C_out
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(x: Tensor, w: Tensor, stride: int, padding: int, grad_out: Tensor):
    """Return (grad_input, grad_weights, grad_bias) for ``conv2d_forward``."""
    _check_conv_args(x, w, stride, padding)
    n, c, h, wd = x.shape
    c_out, _, k, _ = w.shape
    h_out = conv_output_size(h, k, stride, padding)
    w_out = conv_output_size(wd, k, stride, padding)
    if grad_out.shape != (n, c_out, h_out, w_out):
        raise ShapeError(f"upstream gradient {grad_out.shape} does not match forward output {(n, c_out, h_out, w_out)}")
    xp = _pad(x, padding)
    win = _windows(xp, k, stride, h_out, w_out)
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    cols = np.tensordot(grad_out, w, axes=([1], [0]))  # N, Ho, Wo, C, k, k
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    grad_xp = _scatter_windows(cols, xp.shape, stride, h_out, w_out)
    grad_x = grad_xp[:, :, padding : padding + h, padding : padding + wd]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv_transpose2d_forward(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    _check_conv_args(x, w, stride, padding)
    n, c, h, wd = x.shape
    c_in, c_out, k, _ = w.shape
    if c != c_in:
        raise ShapeError(f"input {x.shape} has {c} channels but weights {w.shape} expect {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"bias {b.shape} does not match weights {w.shape}")
    h_out = conv_transpose_output_size(h, k, stride, padding)
    w_out = conv_transpose_output_size(wd, k, stride, padding)
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"zero-sized output for input {x.shape} and weights {w.shape} (stride={stride}, padding={padding})")
    cols = np.tensordot(x, w, axes=([1], [0]))  # N, H, W, C_out, k, k
    cols = cols.transpose(0, 3, 1, 2, 4, 5)
    full = _scatter_windows(cols, (n, c_out, (h - 1) * stride + k, (wd - 1) * stride + k), stride, h, wd)
    out = full[:, :, padding : padding + h_out, padding : padding + w_out] + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv_transpose2d_backward(x: Tensor, w: Tensor, stride: int, padding: int, grad_out: Tensor):
    _check_conv_args(x, w, stride, padding)
    n, c, h, wd = x.shape
    c_in, c_out, k, _ = w.shape
    expected = (n, c_out, conv_transpose_output_size(h, k, stride, padding), conv_transpose_output_size(wd, k, stride, padding))
    if grad_out.shape != expected:
        raise ShapeError(f"upstream gradient {grad_out.shape} does not match forward output {expected}")
    # the input gradient of the adjoint is the original correlation
    grad_x = conv2d_forward(grad_out, w, np.zeros(c_in), stride, padding)
    win = _windows(_pad(grad_out, padding), k, stride, h, wd)
    grad_w = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


def leaky_relu(x: Tensor, alpha: float) -> Tensor:
    return np.where(x >= 0, x, alpha * x)


def leaky_relu_backward(x: Tensor, alpha: float, grad_out: Tensor) -> Tensor:
    return np.where(x >= 0, grad_out, alpha * grad_out)


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(y: Tensor, grad_out: Tensor) -> Tensor:
    """Backward given the forward *output* y."""
    return grad_out * y * (1.0 - y)


def activation_forward(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x: Tensor, kind: str, grad_out: Tensor, alpha: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu_backward(x, alpha, grad_out)
    if kind == "sigmoid":
        return sigmoid_backward(sigmoid(x), grad_out)
    raise ValueError(f"unknown activation {kind!r}")


def dense_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    flat = x.reshape(x.shape[0], -1)
    if w.ndim != 2 or flat.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"input {x.shape} (flattened {flat.shape}) incompatible with weights {w.shape} and bias {b.shape}")
    return flat @ w.T + b


def dense_backward(x: Tensor, w: Tensor, grad_out: Tensor):
    flat = x.reshape(x.shape[0], -1)
    if grad_out.shape != (flat.shape[0], w.shape[0]):
        raise ShapeError(f"upstream gradient {grad_out.shape} does not match forward output {(flat.shape[0], w.shape[0])}")
    grad_x = (grad_out @ w).reshape(x.shape)
    return grad_x, grad_out.T @ flat, grad_out.sum(axis=0)


def mse_loss(y: Tensor, target: Tensor):
    """Mean squared error and its gradient with respect to ``y``."""
    if y.shape != target.shape:
        raise ShapeError(f"prediction {y.shape} and target {target.shape} differ")
    diff = y - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

LAYER_KINDS = ("conv", "conv_transpose", "dense", "leaky_relu", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    alpha: float = 0.2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "conv_transpose"):
            if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
                raise ValueError(f"invalid conv hyperparameters in {self}")
        if self.kind in ("conv", "conv_transpose", "dense"):
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"channel counts must be positive in {self}")
        if self.kind == "leaky_relu" and not 0.0 < self.alpha < 1.0:
            raise ValueError(f"leaky_relu alpha must lie in (0, 1), got {self.alpha}")

    def to_dict(self) -> dict:
        return asdict(self)


class Layer:
    spec: LayerSpec

    def parameters(self) -> list[Parameter]:
        return []

    def output_shape(self, shape: tuple) -> tuple:
        return shape


class Conv2d(Layer):
    def __init__(self, spec: LayerSpec, rng: Optional[SeededRng] = None):
        self.spec = spec
        k = spec.kernel_size
        shape = (spec.out_channels, spec.in_channels, k, k)
        if rng is None:
            w = np.zeros(shape)
        else:
            w = glorot_uniform(shape, spec.in_channels * k * k, spec.out_channels * k * k, rng)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(spec.out_channels))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, shape):
        c, h, w = shape
        s = self.spec
        if c != s.in_channels:
            raise ShapeError(f"conv expects {s.in_channels} channels, got shape {shape}")
        return (s.out_channels, conv_output_size(h, s.kernel_size, s.stride, s.padding),
                conv_output_size(w, s.kernel_size, s.stride, s.padding))

    def forward(self, x):
        self._x = x
        return conv2d_forward(x, self.weight.value, self.bias.value, self.spec.stride, self.spec.padding)

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(self._x, self.weight.value, self.spec.stride, self.spec.padding, grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class ConvTranspose2d(Layer):
    def __init__(self, spec: LayerSpec, rng: Optional[SeededRng] = None):
        self.spec = spec
        k = spec.kernel_size
        shape = (spec.in_channels, spec.out_channels, k, k)
        if rng is None:
            w = np.zeros(shape)
        else:
            w = glorot_uniform(shape, spec.in_channels * k * k, spec.out_channels * k * k, rng)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(spec.out_channels))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, shape):
        c, h, w = shape
        s = self.spec
        if c != s.in_channels:
            raise ShapeError(f"conv_transpose expects {s.in_channels} channels, got shape {shape}")
        return (s.out_channels, conv_transpose_output_size(h, s.kernel_size, s.stride, s.padding),
                conv_transpose_output_size(w, s.kernel_size, s.stride, s.padding))

    def forward(self, x):
        self._x = x
        return conv_transpose2d_forward(x, self.weight.value, self.bias.value, self.spec.stride, self.spec.padding)

    def backward(self, grad):
        gx, gw, gb = conv_transpose2d_backward(self._x, self.weight.value, self.spec.stride, self.spec.padding, grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class Dense(Layer):
    """Fully connected layer; flattens everything but the batch axis."""

    def __init__(self, spec: LayerSpec, rng: Optional[SeededRng] = None):
        self.spec = spec
        shape = (spec.out_channels, spec.in_channels)
        w = np.zeros(shape) if rng is None else glorot_uniform(shape, spec.in_channels, spec.out_channels, rng)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(spec.out_channels))
        self._x = None

    def parameters(self):
        return [self.weight, self.bias]

    def output_shape(self, shape):
        if math.prod(shape) != self.spec.in_channels:
            raise ShapeError(f"dense expects {self.spec.in_channels} features, got shape {shape}")
        return (self.spec.out_channels,)

    def forward(self, x):
        self._x = x
        return dense_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad):
        gx, gw, gb = dense_backward(self._x, self.weight.value, grad)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class LeakyReLU(Layer):
    def __init__(self, spec: LayerSpec, rng=None):
        self.spec = spec
        self._x = None

    def forward(self, x):
        self._x = x
        return leaky_relu(x, self.spec.alpha)

    def backward(self, grad):
        return leaky_relu_backward(self._x, self.spec.alpha, grad)


class Sigmoid(Layer):
    def __init__(self, spec: LayerSpec, rng=None):
        self.spec = spec
        self._y = None

    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, grad):
        return sigmoid_backward(self._y, grad)


_LAYER_TYPES = {
    "conv": Conv2d,
    "conv_transpose": ConvTranspose2d,
    "dense": Dense,
    "leaky_relu": LeakyReLU,
    "sigmoid": Sigmoid,
}


def build_layer(spec: LayerSpec, rng: Optional[SeededRng] = None) -> Layer:
    return _LAYER_TYPES[spec.kind](spec, rng)


class Block:
    """A labelled sequence of layers, applied in order."""

    def __init__(self, label: str, specs: list[LayerSpec], rng: Optional[SeededRng] = None):
        self.label = label
        self.specs = list(specs)
        self.layers = [build_layer(s, rng) for s in self.specs]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def output_shape(self, shape: tuple) -> tuple:
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def forward(self, x: Tensor, trace: Optional[list] = None) -> Tensor:
        if trace is not None:
            trace.append(self.label)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def to_config(self) -> dict:
        return {"label": self.label, "layers": [s.to_dict() for s in self.specs]}

    @classmethod
    def from_config(cls, cfg: dict) -> "Block":
        return cls(cfg["label"], [LayerSpec(**d) for d in cfg["layers"]])
