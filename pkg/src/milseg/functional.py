"""Differentiable operations on :class:`~milseg.tensor.Tensor`.

Images use the batch x channels x height x width layout. Every op works in
the dtype of its inputs, so the same code runs at float32 for training and
float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, InputError
from .tensor import Tensor, from_op

LEAKY_SLOPE = 0.2
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ConvParams:
    """Kernel and bias of a square-kernel (transposed) convolution.

    ``weights`` is ``out_channels x in_channels x m x m`` for both directions;
    for :func:`deconv2d` "out" means the channels it produces.
    ``output_padding`` only applies to :func:`deconv2d` and adds rows/columns at
    the bottom/right so that odd sizes can be restored exactly.
    """

    weights: Tensor
    bias: Tensor
    stride: int = 2
    padding: int = 1
    output_padding: int = 0

    def __post_init__(self):
        w = self.weights.shape
        if len(w) != 4 or w[2] != w[3]:
            raise DimensionError(f"kernel must be out x in x m x m, got {w}")
        if self.bias.shape != (w[0],):
            raise DimensionError(f"bias shape {self.bias.shape} does not match out_channels {w[0]}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigurationError("stride must be positive and padding non-negative")
        if not 0 <= self.output_padding <= self.padding:
            raise ConfigurationError("output_padding must lie in [0, padding]")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]


@dataclass
class BatchNormState:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON
    training: bool = True

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "") -> "BatchNormState":
        return cls(
            scale=Tensor(np.ones(channels, dtype), requires_grad=True, name=f"{name}.scale"),
            shift=Tensor(np.zeros(channels, dtype), requires_grad=True, name=f"{name}.shift"),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected a 4-D batch x channels x height x width input, got shape {x.shape}")


def _check_channels(x: Tensor, expected: int, op: str) -> None:
    if x.shape[1] != expected:
        raise DimensionError(f"{op}: channel axis (1) has size {x.shape[1]}, expected {expected}")


def conv_output_size(size: int, m: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - m) // stride + 1


def deconv_output_size(size: int, m: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + m + output_padding


def _windows(xp: np.ndarray, m: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    # N x C x out_h x out_w x m x m view, no copy
    win = sliding_window_view(xp, (m, m), axis=(2, 3))
    return win[:, :, : stride * (out_h - 1) + 1 : stride, : stride * (out_w - 1) + 1 : stride]


def _scatter_windows(cols: np.ndarray, full_h: int, full_w: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum N x C x h x w x m x m patches into N x C x full_h x full_w."""
    n, c, h, w, m, _ = cols.shape
    out = np.zeros((n, c, full_h, full_w), dtype=cols.dtype)
    for i in range(m):
        for j in range(m):
            out[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += cols[..., i, j]
    return out


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> tuple[np.ndarray, np.ndarray]:
    m = w.shape[2]
    out_h = conv_output_size(x.shape[2], m, stride, padding)
    out_w = conv_output_size(x.shape[3], m, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, m, stride, out_h, out_w)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N x oh x ow x O
    return y.transpose(0, 3, 1, 2), win


def _deconv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, out_h: int, out_w: int) -> np.ndarray:
    m = w.shape[2]
    n, _, h, wd = x.shape
    cols = np.tensordot(x, w, axes=([1], [1]))  # N x h x w x O x m x m
    full = _scatter_windows(cols.transpose(0, 3, 1, 2, 4, 5), (h - 1) * stride + m, (wd - 1) * stride + m, stride)
    return full[:, :, padding : padding + out_h, padding : padding + out_w]


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Strided 2-D cross-correlation plus per-channel bias (no activation)."""
    _check_4d(x, "conv2d")
    _check_channels(x, params.in_channels, "conv2d")
    m, s, p = params.kernel_size, params.stride, params.padding
    for axis in (2, 3):
        if x.shape[axis] + 2 * p < m:
            raise DimensionError(f"conv2d: axis {axis} of size {x.shape[axis]} is smaller than the kernel ({m}) after padding {p}")
    w, b = params.weights, params.bias
    y, win = _conv_forward(x.data, w.data, s, p)
    y = y + b.data[None, :, None, None]
    in_shape = x.shape

    def backward_fn(g: np.ndarray):
        gx = gw = gb = None
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O x C x m x m
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # N x oh x ow x C x m x m
            full_h, full_w = in_shape[2] + 2 * p, in_shape[3] + 2 * p
            gxp = _scatter_windows(cols.transpose(0, 3, 1, 2, 4, 5), full_h, full_w, s)
            gx = gxp[:, :, p : p + in_shape[2], p : p + in_shape[3]]
        return gx, gw, gb

    return from_op(y, (x, w, b), backward_fn)


def deconv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Transposed convolution: the adjoint of :func:`conv2d` plus bias.

    ``deconv2d(y, ConvParams(W.transpose(1, 0, 2, 3), ...))`` is the adjoint of
    ``conv2d(., ConvParams(W, ...))`` when biases are zero.
    """
    _check_4d(x, "deconv2d")
    _check_channels(x, params.in_channels, "deconv2d")
    m, s, p, op = params.kernel_size, params.stride, params.padding, params.output_padding
    out_h = deconv_output_size(x.shape[2], m, s, p, op)
    out_w = deconv_output_size(x.shape[3], m, s, p, op)
    for axis, size in ((2, out_h), (3, out_w)):
        if size < 1:
            raise DimensionError(f"deconv2d: axis {axis} of size {x.shape[axis]} yields empty output")
    w, b = params.weights, params.bias
    y = _deconv_forward(x.data, w.data, s, p, out_h, out_w) + b.data[None, :, None, None]
    in_h, in_w = x.shape[2], x.shape[3]

    def backward_fn(g: np.ndarray):
        gx = gw = gb = None
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad or w.requires_grad:
            full = np.zeros(g.shape[:2] + ((in_h - 1) * s + m, (in_w - 1) * s + m), dtype=g.dtype)
            full[:, :, p : p + out_h, p : p + out_w] = g
            win = _windows(full, m, s, in_h, in_w)  # N x O x h x w x m x m
            if x.requires_grad:
                gx = np.tensordot(win, w.data, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
            if w.requires_grad:
                gw = np.tensordot(win, x.data, axes=([0, 2, 3], [0, 2, 3])).transpose(0, 3, 1, 2)
        return gx, gw, gb

    return from_op(y, (x, w, b), backward_fn)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    data = x.data
    pos = data > 0
    factor = np.where(pos, data.dtype.type(1), data.dtype.type(slope))
    return from_op(data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel normalisation; batch statistics in training, running statistics otherwise.

    Training mode updates ``running_mean``/``running_var`` in place with
    ``running = momentum * running + (1 - momentum) * batch`` (unbiased batch variance).
    """
    _check_4d(x, "batch_norm")
    _check_channels(x, state.channels, "batch_norm")
    data = x.data
    dt = data.dtype
    scale, shift = state.scale, state.shift
    eps = dt.type(state.epsilon)
    if not state.training:
        inv_std = (1.0 / np.sqrt(state.running_var.astype(dt) + eps)).astype(dt)
        xhat = (data - state.running_mean.astype(dt)[None, :, None, None]) * inv_std[None, :, None, None]
        y = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

        def backward_eval(g: np.ndarray):
            gx = g * (scale.data * inv_std)[None, :, None, None]
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return from_op(y, (x, scale, shift), backward_eval)

    count = data.shape[0] * data.shape[2] * data.shape[3]
    mean = data.mean(axis=(0, 2, 3))
    centered = data - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None, None]
    y = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    mom = state.momentum
    unbiased = var * (count / (count - 1)) if count > 1 else var
    state.running_mean[...] = mom * state.running_mean + (1 - mom) * mean
    state.running_var[...] = mom * state.running_var + (1 - mom) * unbiased

    def backward_train(g: np.ndarray):
        gshift = g.sum(axis=(0, 2, 3))
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * scale.data[None, :, None, None]
        gx = (inv_std / count)[None, :, None, None] * (
            count * gxhat
            - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
        return gx, gscale, gshift

    return from_op(y, (x, scale, shift), backward_train)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``; identity outside training."""
    if not 0 <= rate < 1:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        rng = np.random.default_rng()
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return from_op(x.data * mask, (x,), lambda g: (g * mask,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise DimensionError(f"concat_channels: {label} axis ({axis}) differs: {a.shape[axis]} vs {b.shape[axis]}")
    ca = a.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)
    return from_op(y, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def global_average_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_average_pool")
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))
    inv = x.dtype.type(1.0 / (h * w))

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).copy(),)

    return from_op(y, (x,), backward_fn)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return from_op(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``x @ weights.T + bias`` with ``weights`` shaped out_features x in_features."""
    if x.ndim != 2:
        raise DimensionError(f"linear: expected batch x features input, got shape {x.shape}")
    if x.shape[1] != weights.shape[1]:
        raise DimensionError(f"linear: feature axis (1) has size {x.shape[1]}, weights expect {weights.shape[1]}")
    y = x.data @ weights.data.T + bias.data

    def backward_fn(g: np.ndarray):
        return g @ weights.data, g.T @ x.data, g.sum(axis=0)

    return from_op(y, (x, weights, bias), backward_fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected batch x classes logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0]} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((log_norm - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward_fn(g: np.ndarray):
        grad = softmax(logits.data)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return from_op(loss, (logits,), backward_fn)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ: {a.shape} vs {b.shape}")
    return from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
