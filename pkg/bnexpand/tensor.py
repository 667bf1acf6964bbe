"""
    bnexpand.tensor
    ~~~~~~~~~~~~~~~

    Dense tensor arithmetic. Everything here is the slow, obviously
    correct reference path: convolution is a direct summation over kernel
    taps, and every backward pass is written out by hand. The fast kernels
    in :mod:`bnexpand.bitkernel` are tested against these functions.

    Tensors are plain :class:`numpy.ndarray` objects laid out as
    ``(batch, channel, height, width)``; operations preserve the floating
    point dtype of their inputs.

    >>> import numpy as np
    >>> geom = ConvGeometry(1, 1, 3, 3, in_h=3, in_w=3)
    >>> conv2d_ref(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), geom)
    array([[[[9.]]]])

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
from __future__ import annotations

from typing import Any, NamedTuple, TypeAlias

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

Tensor: TypeAlias = npt.NDArray[np.floating[Any]]

#: Defaults used by :class:`BatchNormState`.
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


def out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output extent of a sliding window along one axis.

    >>> out_size(14, 3, 1, 1)
    14
    >>> out_size(32, 3, 2, 1)
    16
    """
    return (size + 2 * padding - kernel) // stride + 1


class ConvGeometry(NamedTuple):
    """Hyperparameters of a single convolution.

    :param int in_channels: input channels, ``c_in``.
    :param int out_channels: output channels, ``c_out``.
    :param int kernel_h: kernel height.
    :param int kernel_w: kernel width.
    :param int stride: stride along both spatial axes.
    :param int padding: zero padding along both spatial axes.
    :param int in_h: input height.
    :param int in_w: input width.
    """
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    in_h: int = 1
    in_w: int = 1

    @property
    def out_h(self) -> int:
        return out_size(self.in_h, self.kernel_h, self.stride, self.padding)

    @property
    def out_w(self) -> int:
        return out_size(self.in_w, self.kernel_w, self.stride, self.padding)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels,
                self.kernel_h, self.kernel_w)

    @property
    def reduction(self) -> int:
        """Length of one output element's dot product."""
        return self.in_channels * self.kernel_h * self.kernel_w

    def validate(self) -> None:
        """Raise :exc:`ValueError` if the geometry has no valid output."""
        if min(self.in_channels, self.out_channels, self.kernel_h,
               self.kernel_w, self.stride) < 1 or self.padding < 0:
            raise ValueError(f"invalid convolution geometry {self}")
        if self.out_h < 1 or self.out_w < 1:
            raise ValueError(f"{self} produces an empty output")


def check_rank(x: Tensor, rank: int, what: str = "input") -> None:
    if x.ndim != rank:
        raise DimensionError("rank", rank, x.ndim, what)


def check_conv(input: Tensor, weight: Tensor, geom: ConvGeometry) -> None:
    """Check that ``input`` and ``weight`` agree with ``geom``."""
    check_rank(input, 4)
    check_rank(weight, 4, "weight")
    if input.shape[1] != geom.in_channels:
        raise DimensionError("channel", geom.in_channels, input.shape[1])
    if input.shape[2] != geom.in_h:
        raise DimensionError("height", geom.in_h, input.shape[2])
    if input.shape[3] != geom.in_w:
        raise DimensionError("width", geom.in_w, input.shape[3])
    if weight.shape != geom.weight_shape:
        raise DimensionError("kernel", geom.weight_shape, weight.shape,
                             "weight")


def pad2d(x: Tensor, padding: int, value: float = 0.0) -> Tensor:
    if not padding:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                  constant_values=value)


def _tap(geom: ConvGeometry, i: int, j: int) -> tuple[slice, ...]:
    """Index of all input pixels touched by kernel tap ``(i, j)``."""
    s = geom.stride
    return (slice(None), slice(None),
            slice(i, i + s * (geom.out_h - 1) + 1, s),
            slice(j, j + s * (geom.out_w - 1) + 1, s))


def conv2d_ref(input: Tensor, weight: Tensor, geom: ConvGeometry) -> Tensor:
    """Direct-summation 2D convolution with zero padding and no bias.

    :param input: ``(batch, c_in, in_h, in_w)`` activations.
    :param weight: ``(c_out, c_in, kernel_h, kernel_w)`` filters.
    :param geom: geometry both tensors must agree with.
    :returns: ``(batch, c_out, out_h, out_w)``.
    """
    check_conv(input, weight, geom)
    padded = pad2d(input, geom.padding)
    out = np.zeros((input.shape[0], geom.out_channels, geom.out_h, geom.out_w),
                   dtype=np.result_type(input, weight))
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            patch = padded[_tap(geom, i, j)]
            out += np.tensordot(weight[:, :, i, j], patch,
                                axes=(1, 1)).transpose(1, 0, 2, 3)
    return out


def conv2d_ref_backward(grad: Tensor, input: Tensor, weight: Tensor,
                        geom: ConvGeometry) -> tuple[Tensor, Tensor]:
    """Gradients of :func:`conv2d_ref` w.r.t. its input and weight."""
    p = geom.padding
    padded = pad2d(input, p)
    grad_padded = np.zeros_like(padded)
    grad_weight = np.zeros_like(weight)
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            tap = _tap(geom, i, j)
            grad_weight[:, :, i, j] = np.tensordot(
                grad, padded[tap], axes=([0, 2, 3], [0, 2, 3]))
            grad_padded[tap] += np.tensordot(
                grad, weight[:, :, i, j], axes=(1, 0)).transpose(0, 3, 1, 2)
    grad_input = grad_padded[:, :, p:p + geom.in_h, p:p + geom.in_w]
    return grad_input, grad_weight


def linear_ref(input: Tensor, weight: Tensor) -> Tensor:
    """Matrix product ``input @ weight.T`` without bias.

    >>> linear_ref(np.array([[1., 2.]]), np.array([[1., 0.], [0., 1.], [1., 1.]]))
    array([[1., 2., 3.]])
    """
    check_rank(input, 2)
    check_rank(weight, 2, "weight")
    if input.shape[1] != weight.shape[1]:
        raise DimensionError("features", weight.shape[1], input.shape[1])
    return input @ weight.T


def linear_backward(grad: Tensor, input: Tensor,
                    weight: Tensor) -> tuple[Tensor, Tensor]:
    return grad @ weight, grad.T @ input


class BatchNormState:
    """Per-channel affine parameters and running statistics.

    :param int channels: number of normalized channels.
    :param dtype: floating point type of all arrays.
    """
    __slots__ = ("gamma", "delta", "running_mean", "running_var",
                 "momentum", "eps")

    def __init__(self, channels: int, dtype: Any = np.float32,
                 momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON) -> None:
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.gamma = np.ones(channels, dtype=dtype)
        self.delta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


class BatchNormCache(NamedTuple):
    xhat: Tensor
    inv_std: Tensor
    gamma: Tensor
    train: bool


def _stat_axes(x: Tensor) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    check_rank(x, 2)
    return (0,), (1, -1)


def batchnorm_forward(x: Tensor, state: BatchNormState,
                      train: bool) -> tuple[Tensor, BatchNormCache]:
    """Normalize ``x`` per channel.

    In train mode the batch statistics are used and the running
    statistics in ``state`` are updated in place; in eval mode the
    running statistics are used and ``state`` is left untouched.
    """
    axes, view = _stat_axes(x)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[1]
        m = state.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        state.running_mean[:] = (1 - m) * state.running_mean + m * mean
        state.running_var[:] = (1 - m) * state.running_var + m * unbiased
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean.reshape(view)) * inv_std.reshape(view)
    y = state.gamma.reshape(view) * xhat + state.delta.reshape(view)
    return y.astype(x.dtype, copy=False), BatchNormCache(
        xhat, inv_std, state.gamma.copy(), train)


def batchnorm_backward(grad: Tensor, cache: BatchNormCache
                       ) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients w.r.t. the input, ``gamma`` and ``delta``."""
    axes, view = _stat_axes(grad)
    xhat = cache.xhat
    grad_gamma = (grad * xhat).sum(axis=axes)
    grad_delta = grad.sum(axis=axes)
    gxhat = grad * cache.gamma.reshape(view)
    inv_std = cache.inv_std.reshape(view)
    if not cache.train:
        return gxhat * inv_std, grad_gamma, grad_delta

    n = grad.size // grad.shape[1]
    grad_input = (inv_std / n) * (
        n * gxhat
        - gxhat.sum(axis=axes).reshape(view)
        - xhat * (gxhat * xhat).sum(axis=axes).reshape(view))
    return grad_input, grad_gamma, grad_delta


class PoolCache(NamedTuple):
    input_shape: tuple[int, ...]
    size: int
    stride: int
    padding: int
    argmax: npt.NDArray[np.intp] | None


def _windows(x: Tensor, size: int, stride: int, padding: int,
             fill: float) -> Tensor:
    padded = pad2d(x, padding, fill)
    view = sliding_window_view(padded, (size, size), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def maxpool2d(x: Tensor, size: int, stride: int | None = None,
              padding: int = 0) -> tuple[Tensor, PoolCache]:
    """Max pooling; padded positions never win."""
    check_rank(x, 4)
    stride = stride or size
    windows = _windows(x, size, stride, padding, -np.inf)
    flat = windows.reshape(windows.shape[:4] + (size * size,))
    argmax = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return y, PoolCache(x.shape, size, stride, padding, argmax)


def avgpool2d(x: Tensor, size: int, stride: int | None = None,
              padding: int = 0) -> tuple[Tensor, PoolCache]:
    """Average pooling; padded positions count as zeros."""
    check_rank(x, 4)
    stride = stride or size
    y = _windows(x, size, stride, padding, 0.0).mean(axis=(-2, -1))
    return y.astype(x.dtype, copy=False), PoolCache(
        x.shape, size, stride, padding, None)


def pool2d_backward(grad: Tensor, cache: PoolCache) -> Tensor:
    n, c, h, w = cache.input_shape
    size, s, p = cache.size, cache.stride, cache.padding
    grad_padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
    out_h, out_w = grad.shape[2], grad.shape[3]
    if cache.argmax is None:
        share = grad / (size * size)
        for i in range(size):
            for j in range(size):
                grad_padded[:, :, i:i + s * (out_h - 1) + 1:s,
                            j:j + s * (out_w - 1) + 1:s] += share
    else:
        ni, ci, hi, wi = np.indices(grad.shape, sparse=True)
        rows = hi * s + cache.argmax // size
        cols = wi * s + cache.argmax % size
        np.add.at(grad_padded, (ni, ci, rows, cols), grad)
    return grad_padded[:, :, p:p + h, p:p + w]


def global_avgpool(x: Tensor) -> Tensor:
    check_rank(x, 4)
    return x.mean(axis=(2, 3))


def global_avgpool_backward(grad: Tensor, input_shape: tuple[int, ...]) -> Tensor:
    h, w = input_shape[2], input_shape[3]
    share = grad[:, :, None, None] / (h * w)
    return np.broadcast_to(share, input_shape).astype(grad.dtype)


def softmax_cross_entropy(logits: Tensor, labels: npt.NDArray[np.integer[Any]]
                          ) -> tuple[float, Tensor]:
    """Mean softmax cross-entropy over the batch.

    :returns: the loss and its gradient w.r.t. ``logits``.

    >>> loss, _ = softmax_cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    >>> round(loss, 6) == round(float(np.log(4)), 6)
    True
    """
    check_rank(logits, 2, "logits")
    n, classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError("batch", (n,), labels.shape, "labels")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")

    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)
