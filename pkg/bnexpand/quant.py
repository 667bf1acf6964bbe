"""
    bnexpand.quant
    ~~~~~~~~~~~~~~

    Quantization functions and their straight-through estimators:

    * weights are binarized as ``alpha * sign(w)`` with one ``alpha`` per
      output filter, the mean of the filter's absolute values;
    * activations are clipped to ``[0, beta]`` and rounded to ``k`` bits;
    * for ``k == 1`` activations are binarized XNOR-style, as
      ``scale * sign(y)`` with one scale per pixel.

    ``sign(0)`` is ``+1`` everywhere, matching packed bit ``1``.

    >>> import numpy as np
    >>> quantize_activation(np.array([0.4, -0.5, 2.0]), QuantSpec(k=2))
    array([0.33333333, 0.        , 1.        ])

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
from __future__ import annotations

from typing import Any, NamedTuple

import numpy as np

from .bitkernel import PackedBits, SignActivations, pack_bits, unpack_bits
from .tensor import Tensor, check_rank

#: Bitwidth at and above which quantizers are the identity and weights
#: stay full precision (debug mode).
FULL_PRECISION = 32


class QuantSpec(NamedTuple):
    """Activation quantizer parameters.

    :param int k: activation bitwidth; ``1`` selects XNOR binarization,
                  :data:`FULL_PRECISION` turns quantization off.
    :param float beta: fixed clip bound of the activation range.
    """
    k: int = 2
    beta: float = 1.0

    @property
    def levels(self) -> int:
        return int(2 ** self.k - 1)

    @property
    def step(self) -> float:
        """Distance between neighbouring grid points."""
        return self.beta / self.levels

    @property
    def full_precision(self) -> bool:
        return self.k >= FULL_PRECISION

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError(f"activation bitwidth must be >= 1, got {self.k}")
        if not self.beta > 0:
            raise ValueError(f"clip bound must be positive, got {self.beta}")

    def codes(self, y: Tensor) -> Tensor:
        """Integer grid index of every value, as floats."""
        return np.rint(np.clip(y, 0.0, self.beta) * (self.levels / self.beta))

    def dequantize(self, codes: Tensor) -> Tensor:
        return codes * self.step


class BinarizedWeight(NamedTuple):
    """Binary filters: packed sign bits plus a scale per output filter.

    :param sign_bits: ``(c_out, kernel_h, kernel_w, c_in)`` sign bits, the
                      channel axis packed.
    :param alpha: ``(c_out,)`` non-negative scales.
    :param tuple shape: shape of the original weight.
    """
    sign_bits: PackedBits
    alpha: Tensor
    shape: tuple[int, ...]

    def signs(self) -> Tensor:
        bits = unpack_bits(self.sign_bits).transpose(0, 3, 1, 2)
        return np.where(bits, 1, -1).astype(self.alpha.dtype).reshape(self.shape)

    def dequantize(self) -> Tensor:
        view = (-1,) + (1,) * (len(self.shape) - 1)
        return self.alpha.reshape(view) * self.signs()


def weight_scale(w: Tensor) -> Tensor:
    """``alpha`` of every output filter: the mean of its absolute values."""
    return np.abs(w).reshape(w.shape[0], -1).mean(axis=1)


def binarize_weights_dense(w: Tensor) -> Tensor:
    """``alpha * sign(w)`` as a dense tensor, for the reference path."""
    view = (-1,) + (1,) * (w.ndim - 1)
    return weight_scale(w).reshape(view) * np.where(w >= 0, 1, -1).astype(w.dtype)


def binarize_weights(w: Tensor) -> BinarizedWeight:
    """Binarize a filter bank ``(c_out, c_in, h, w)`` or a dense matrix
    ``(out, features)``, packing the signs for the bit kernels.
    """
    w4 = w if w.ndim == 4 else w.reshape(w.shape[0], -1, 1, 1)
    bits = pack_bits(w4.transpose(0, 2, 3, 1) >= 0)
    return BinarizedWeight(bits, weight_scale(w), tuple(w.shape))


def binarize_weights_backward(grad_b: Tensor) -> Tensor:
    """Straight-through: the latent weight receives the binary weight's
    gradient unchanged.
    """
    return grad_b


def quantize_activation(y: Tensor, q: QuantSpec) -> Tensor:
    """Clip ``y`` to ``[0, beta]`` and round it to the ``k``-bit grid."""
    if q.full_precision:
        return y
    if q.k == 1:
        raise ValueError("1-bit activations go through binarize_activation_xnor")
    return q.dequantize(q.codes(y))


def quantize_activation_backward(grad: Tensor, y: Tensor, q: QuantSpec) -> Tensor:
    """Rounding passes the gradient through, the clip blocks it outside
    ``[0, beta]``.
    """
    if q.full_precision:
        return grad
    return grad * ((y >= 0) & (y <= q.beta))


def binarize_activation_xnor(y: Tensor) -> SignActivations:
    """Sign bits of ``y`` plus the mean of ``|y|`` over channels at
    every pixel.
    """
    check_rank(y, 4)
    nhwc = y.transpose(0, 2, 3, 1)
    return SignActivations(pack_bits(nhwc >= 0), np.abs(nhwc).mean(axis=-1))


def binarize_activation_dense(y: Tensor) -> Tensor:
    scale = np.abs(y).mean(axis=1, keepdims=True)
    return scale * np.where(y >= 0, 1, -1).astype(y.dtype)


def binarize_activation_backward(grad: Tensor, y: Tensor) -> Tensor:
    return grad * (np.abs(y) <= 1)


def activation(y: Tensor, q: QuantSpec) -> Tensor:
    """Apply whichever activation quantizer ``q`` selects."""
    if q.k == 1:
        return binarize_activation_dense(y)
    return quantize_activation(y, q)


def activation_backward(grad: Tensor, y: Tensor, q: QuantSpec) -> Tensor:
    if q.k == 1:
        return binarize_activation_backward(grad, y)
    return quantize_activation_backward(grad, y, q)


def grid_values(q: QuantSpec, dtype: Any = np.float64) -> Tensor:
    """All values :func:`quantize_activation` can produce."""
    return q.dequantize(np.arange(q.levels + 1, dtype=dtype))
