"""Hand-differentiated layers operating on float64 numpy arrays.

Every layer implements ``forward(x, train)`` and ``backward(grad)``. The
backward pass accumulates into ``Parameter.grad`` and returns the gradient
with respect to the layer input. Tied decoder layers hold a reference to the
*same* ``Parameter`` object as their encoder partner, so both uses add into
one gradient buffer and one in-place update serves both.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeMismatch(ValueError):
    pass


class Parameter:
    """A learnable tensor and its gradient accumulator."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# --------------------------------------------------------------------------
# convolution primitives (valid padding, arbitrary stride)
# --------------------------------------------------------------------------


def conv_output_shape(h: int, w: int, kernel, stride) -> tuple[int, int]:
    kh, kw = kernel
    sh, sw = stride
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    if h < kh or w < kw or ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {kernel} does not fit input {h}x{w}")
    return ho, wo


def _windows(x: np.ndarray, kernel, stride) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, kh, kw)."""
    kh, kw = kernel
    sh, sw = stride
    ho, wo = conv_output_shape(x.shape[2], x.shape[3], kernel, stride)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def conv2d(x: np.ndarray, w: np.ndarray, stride) -> np.ndarray:
    """Cross-correlation of x [N,C,H,W] with w [O,C,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d input {x.shape} vs kernel {w.shape}")
    win = _windows(x, w.shape[2:], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad_input(dy: np.ndarray, w: np.ndarray, stride, input_hw) -> np.ndarray:
    """Adjoint of ``conv2d`` with respect to its input.

    This is also the forward map of the transposed convolution.
    """
    n, o, ho, wo = dy.shape
    if w.shape[0] != o:
        raise ShapeMismatch(f"grad {dy.shape} vs kernel {w.shape}")
    _, c, kh, kw = w.shape
    sh, sw = stride
    h, wd = input_hw
    if conv_output_shape(h, wd, (kh, kw), stride) != (ho, wo):
        raise ShapeMismatch(f"input {h}x{wd} does not map to {ho}x{wo}")
    cols = np.tensordot(dy, w, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
    if (sh, sw) == (kh, kw):
        # non-overlapping windows tile the input exactly
        dx = np.zeros((n, c, h, wd), dtype=DTYPE)
        tiled = cols.transpose(0, 3, 1, 4, 2, 5).reshape(n, c, ho * kh, wo * kw)
        dx[:, :, : ho * kh, : wo * kw] = tiled
        return dx
    dx = np.zeros((n, c, h, wd), dtype=DTYPE)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # N,C,kh,kw,Ho,Wo
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += cols[:, :, i, j]
    return dx


def conv2d_grad_weight(x: np.ndarray, dy: np.ndarray, kernel, stride) -> np.ndarray:
    win = _windows(x, kernel, stride)
    return np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class Layer:
    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride, rng, bias=True, name="conv"):
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        kh, kw = self.kernel
        shape = (out_channels, in_channels, kh, kw)
        self.W = Parameter(
            f"{name}.W",
            glorot_uniform(rng, shape, in_channels * kh * kw, out_channels * kh * kw),
        )
        self.b = Parameter(f"{name}.b", np.zeros(out_channels)) if bias else None
        self._x = None

    def parameters(self):
        return [self.W] + ([self.b] if self.b is not None else [])

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (self.W.data.shape[0],) + conv_output_shape(h, w, self.kernel, self.stride)

    def forward(self, x, train=True):
        self._x = x
        y = conv2d(x, self.W.data, self.stride)
        if self.b is not None:
            y += self.b.data[None, :, None, None]
        return y

    def backward(self, grad):
        x = self._x
        self.W.grad += conv2d_grad_weight(x, grad, self.kernel, self.stride)
        if self.b is not None:
            self.b.grad += grad.sum(axis=(0, 2, 3))
        return conv2d_grad_input(grad, self.W.data, self.stride, x.shape[2:])


class ConvTranspose2d(Layer):
    """Transposed convolution sharing its kernel with an encoder ``Conv2d``.

    Maps the conv's output geometry back onto its input geometry.
    """

    def __init__(self, tied: Conv2d, input_hw, bias=True, name="deconv"):
        self.tied = tied
        self.input_hw = tuple(input_hw)  # spatial size this layer reconstructs
        c = tied.W.data.shape[1]
        self.b = Parameter(f"{name}.b", np.zeros(c)) if bias else None
        self._h = None

    @property
    def W(self) -> Parameter:
        return self.tied.W

    def parameters(self):
        return [self.W] + ([self.b] if self.b is not None else [])

    def output_shape(self, input_shape):
        return (self.W.data.shape[1],) + self.input_hw

    def forward(self, h, train=True):
        self._h = h
        z = conv2d_grad_input(h, self.W.data, self.tied.stride, self.input_hw)
        if self.b is not None:
            z += self.b.data[None, :, None, None]
        return z

    def backward(self, grad):
        # z = A^T h, so dL/dW has the conv-filter form with the roles of x and dy swapped
        self.W.grad += conv2d_grad_weight(grad, self._h, self.tied.kernel, self.tied.stride)
        if self.b is not None:
            self.b.grad += grad.sum(axis=(0, 2, 3))
        return conv2d(grad, self.W.data, self.tied.stride)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng, bias=True, name="fc"):
        self.W = Parameter(
            f"{name}.W", glorot_uniform(rng, (out_features, in_features), in_features, out_features)
        )
        self.b = Parameter(f"{name}.b", np.zeros(out_features)) if bias else None
        self._x = None

    def parameters(self):
        return [self.W] + ([self.b] if self.b is not None else [])

    def output_shape(self, input_shape):
        return (self.W.data.shape[0],)

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.W.data.shape[1]:
            raise ShapeMismatch(f"linear input {x.shape} vs weight {self.W.data.shape}")
        self._x = x
        y = x @ self.W.data.T
        if self.b is not None:
            y += self.b.data
        return y

    def backward(self, grad):
        self.W.grad += grad.T @ self._x
        if self.b is not None:
            self.b.grad += grad.sum(axis=0)
        return grad @ self.W.data


class LinearTied(Layer):
    """Decoder-side affine map using the transpose of an encoder ``Linear``."""

    def __init__(self, tied: Linear, bias=True, name="fcT"):
        self.tied = tied
        self.b = Parameter(f"{name}.b", np.zeros(tied.W.data.shape[1])) if bias else None
        self._h = None

    @property
    def W(self) -> Parameter:
        return self.tied.W

    def weight_view(self) -> np.ndarray:
        """The decoder weight, a transposed view onto the encoder storage."""
        return self.W.data.T

    def parameters(self):
        return [self.W] + ([self.b] if self.b is not None else [])

    def output_shape(self, input_shape):
        return (self.W.data.shape[1],)

    def forward(self, h, train=True):
        if h.ndim != 2 or h.shape[1] != self.W.data.shape[0]:
            raise ShapeMismatch(f"tied linear input {h.shape} vs weight {self.W.data.shape}")
        self._h = h
        z = h @ self.W.data
        if self.b is not None:
            z += self.b.data
        return z

    def backward(self, grad):
        self.W.grad += self._h.T @ grad
        if self.b is not None:
            self.b.grad += grad.sum(axis=0)
        return grad @ self.W.data.T


class ELU(Layer):
    def __init__(self, alpha: float = 1.0):
        self.alpha = alpha
        self._x = None

    def forward(self, x, train=True):
        self._x = x
        return elu(x, self.alpha)

    def backward(self, grad):
        x = self._x
        return grad * np.where(x > 0, 1.0, self.alpha * np.exp(np.minimum(x, 0.0)))


def elu(x, alpha: float = 1.0):
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


class BatchNorm(Layer):
    """Batch normalization over the channel axis (axis 1) of 2-D or 4-D input."""

    def __init__(self, num_features, eps=1e-5, momentum=0.9, name="bn"):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(f"{name}.gamma", np.ones(num_features))
        self.beta = Parameter(f"{name}.beta", np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self._cache = None

    def parameters(self):
        return [self.gamma, self.beta]

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bcast(v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x, train=True):
        axes = self._axes(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean *= m
            self.running_mean += (1.0 - m) * mean
            self.running_var *= m
            self.running_var += (1.0 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
        self._cache = (xhat, inv_std, train)
        return xhat * self._bcast(self.gamma.data, x) + self._bcast(self.beta.data, x)

    def backward(self, grad):
        xhat, inv_std, train = self._cache
        axes = self._axes(grad)
        self.gamma.grad += (grad * xhat).sum(axis=axes)
        self.beta.grad += grad.sum(axis=axes)
        dxhat = grad * self._bcast(self.gamma.data, grad)
        if not train:
            return dxhat * self._bcast(inv_std, grad)
        m = grad.size // grad.shape[1]
        s1 = self._bcast(dxhat.sum(axis=axes), grad)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), grad)
        return (dxhat - s1 / m - xhat * s2 / m) * self._bcast(inv_std, grad)


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)
        self._in = None

    def output_shape(self, input_shape):
        return self.shape

    def forward(self, x, train=True):
        self._in = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._in)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def parameters(self):
        seen, out = set(), []
        for layer in self.layers:
            for p in layer.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def batchnorms(self) -> list[BatchNorm]:
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    def output_shape(self, input_shape):
        for layer in self.layers:
            input_shape = layer.output_shape(input_shape)
        return input_shape

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def trace(self, x, train=False) -> list[tuple]:
        """Per-layer output shapes (sample axis dropped) for one forward pass."""
        shapes = []
        for layer in self.layers:
            x = layer.forward(x, train)
            shapes.append((type(layer).__name__, x.shape[1:]))
        return shapes
