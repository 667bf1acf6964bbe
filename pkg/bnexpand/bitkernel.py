"""
    bnexpand.bitkernel
    ~~~~~~~~~~~~~~~~~~

    Fast execution paths for quantized convolutions:

    * :func:`binary_conv2d` -- 1-bit activations, XNOR and popcount;
    * :func:`bitsliced_conv2d` -- k-bit activations split into ``k``
      bitplanes, each reduced with AND and popcount against the
      positive and the negative half of the binary weights.

    Bits are packed along the channel axis into 64-bit words; for a
    ``(batch, height, width, channel)`` activation map one pixel's
    channels occupy ``ceil(channels / 64)`` consecutive words, so an
    im2col row is the concatenation of its taps' words. Padding bits
    beyond ``n_valid`` are always written as zeros and always masked out
    when read.

    Both kernels compute exactly what :func:`~bnexpand.tensor.conv2d_ref`
    computes on the dequantized tensors, up to floating point
    accumulation order.

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
from __future__ import annotations

from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np
import numpy.typing as npt

from .errors import ContractViolation, DimensionError
from .tensor import Tensor, check_rank

if TYPE_CHECKING:
    from collections.abc import Iterator
    from .quant import BinarizedWeight, QuantSpec
    from .tensor import ConvGeometry

    Words = npt.NDArray[np.uint64]

#: Bits per packed word.
WORD_BITS = 64

#: Longest dot product the 32-bit accumulators are allowed to see.
MAX_REDUCTION = 1 << 24

#: Upper bound on the number of words a single XOR/AND temporary holds.
_CHUNK_WORDS = 1 << 22

_ALL_ONES = np.uint64(0xFFFF_FFFF_FFFF_FFFF)


def word_count(n_valid: int) -> int:
    """Number of words needed for ``n_valid`` bits.

    >>> word_count(64), word_count(65), word_count(193)
    (1, 2, 4)
    """
    return max(1, -(-n_valid // WORD_BITS))


class PackedBits(NamedTuple):
    """Boolean tensor packed along its last axis.

    :param words: ``shape[:-1] + (word_count(n_valid),)`` unsigned words.
    :param int n_valid: meaningful bits per row, i.e. ``shape[-1]``.
    :param tuple shape: logical shape of the unpacked tensor.
    """
    words: Words
    n_valid: int
    shape: tuple[int, ...]


def pack_bits(bits: npt.NDArray[np.bool_]) -> PackedBits:
    """Pack a boolean tensor along its last axis; bit ``i`` of a row
    goes to bit ``i % 64`` of word ``i // 64``.
    """
    n_valid = bits.shape[-1]
    n_words = word_count(n_valid)
    padded = np.zeros(bits.shape[:-1] + (n_words * WORD_BITS,), dtype=np.uint8)
    padded[..., :n_valid] = bits
    packed = np.packbits(padded, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64)
    return PackedBits(words, n_valid, tuple(bits.shape))


def unpack_bits(packed: PackedBits) -> npt.NDArray[np.bool_]:
    raw = np.ascontiguousarray(packed.words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little")
    return bits[..., :packed.n_valid].astype(bool).reshape(packed.shape)


def tail_mask(n_valid: int) -> Words:
    """Per-word masks selecting the ``n_valid`` meaningful bits."""
    mask = np.full(word_count(n_valid), _ALL_ONES, dtype=np.uint64)
    rest = n_valid % WORD_BITS
    if rest:
        mask[-1] = np.uint64((1 << rest) - 1)
    return mask


def popcount(words: Words) -> npt.NDArray[np.uint8]:
    return np.bitwise_count(words)


def xnor_popcount_dot(a: PackedBits, b: PackedBits) -> int:
    """Dot product of two ``±1`` rows held as sign bits.

    Computed as ``n_valid - 2 * popcount(a XOR b)``; bits beyond
    ``n_valid`` are ignored.
    """
    if a.n_valid != b.n_valid or a.words.shape != b.words.shape:
        raise DimensionError("bits", a.n_valid, b.n_valid, "packed row")
    diff = int(popcount((a.words ^ b.words) & tail_mask(a.n_valid)).sum())
    return a.n_valid - 2 * diff


class SignActivations(NamedTuple):
    """1-bit activations: sign bits plus a per-pixel scale.

    :param bits: ``(batch, height, width, channel)`` sign bits,
                 ``1`` for ``+1``.
    :param scale: ``(batch, height, width)`` magnitudes.
    """
    bits: PackedBits
    scale: Tensor

    def dequantize(self) -> Tensor:
        signs = np.where(unpack_bits(self.bits), 1, -1).astype(self.scale.dtype)
        return (self.scale[..., None] * signs).transpose(0, 3, 1, 2)


class BitplaneCodes(NamedTuple):
    """k-bit activation codes split into ``k`` bitplanes.

    :param planes: plane ``t`` holds bit ``t`` of every code, packed like
                   :attr:`SignActivations.bits`.
    :param float step: value of one code unit, ``beta / (2^k - 1)``.
    :param dtype: floating point type of the dequantized tensor.
    """
    planes: tuple[PackedBits, ...]
    step: float
    dtype: np.dtype[Any]

    def codes(self) -> npt.NDArray[np.int64]:
        codes = np.zeros(self.planes[0].shape, dtype=np.int64)
        for t, plane in enumerate(self.planes):
            codes |= unpack_bits(plane).astype(np.int64) << t
        return codes

    def dequantize(self) -> Tensor:
        values = self.codes().astype(self.dtype) * self.step
        return values.transpose(0, 3, 1, 2)


def pack_activations(y: Tensor, q: QuantSpec) -> SignActivations | BitplaneCodes:
    """Pack activations which already lie on the quantization grid.

    :param y: ``(batch, channel, height, width)`` quantized activations.
    :param q: the quantizer ``y`` came out of.
    :raises ContractViolation: if a value is off the grid.
    """
    check_rank(y, 4)
    nhwc = y.transpose(0, 2, 3, 1)
    if q.full_precision:
        raise ContractViolation("full-precision activations have no packed form")
    if q.k == 1:
        magnitude = np.abs(nhwc)
        scale = magnitude.max(axis=-1)
        if not np.array_equal(magnitude, np.broadcast_to(scale[..., None],
                                                         magnitude.shape)):
            raise ContractViolation(
                "1-bit activations must be +-scale with one scale per pixel")
        return SignActivations(pack_bits(nhwc >= 0), scale)

    codes = q.codes(nhwc)
    off_grid = q.dequantize(codes) != nhwc
    if off_grid.any():
        where = tuple(int(i) for i in np.argwhere(off_grid)[0])
        raise ContractViolation(
            f"value {float(nhwc[where])} at {where} is off the {q.k}-bit grid")
    codes = codes.astype(np.int64)
    planes = tuple(pack_bits(((codes >> t) & 1).astype(bool))
                   for t in range(q.k))
    return BitplaneCodes(planes, q.step, y.dtype)


def _check(shape: tuple[int, ...], weight: BinarizedWeight,
           geom: ConvGeometry) -> None:
    if len(shape) != 4:
        raise DimensionError("rank", 4, len(shape))
    expected = (shape[0], geom.in_h, geom.in_w, geom.in_channels)
    for axis, want, got in zip(("batch", "height", "width", "channel"),
                               expected, shape):
        if want != got:
            raise DimensionError(axis, want, got)
    if weight.shape != geom.weight_shape:
        raise DimensionError("kernel", geom.weight_shape, weight.shape, "weight")
    if geom.reduction > MAX_REDUCTION:
        raise ContractViolation(
            f"reduction length {geom.reduction} exceeds {MAX_REDUCTION}")


def _pad_hw(x: npt.NDArray[Any], padding: int) -> npt.NDArray[Any]:
    """Zero-pad axes 1 and 2 of a ``(batch, height, width, ...)`` array."""
    if not padding:
        return x
    pad = [(0, 0)] * x.ndim
    pad[1] = pad[2] = (padding, padding)
    return np.pad(x, pad)


def _taps(geom: ConvGeometry) -> Iterator[tuple[int, int, tuple[slice, ...]]]:
    s = geom.stride
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            yield i, j, (slice(None),
                         slice(i, i + s * (geom.out_h - 1) + 1, s),
                         slice(j, j + s * (geom.out_w - 1) + 1, s))


def _chunks(pixels: int, n_words: int, out_channels: int) -> list[slice]:
    step = max(1, _CHUNK_WORDS // max(1, pixels * n_words))
    return [slice(lo, min(lo + step, out_channels))
            for lo in range(0, out_channels, step)]


def binary_conv2d(input: SignActivations, weight: BinarizedWeight,
                  geom: ConvGeometry) -> Tensor:
    """XNOR-popcount convolution of 1-bit activations with binary weights.

    For every tap the per-pixel dot product over channels is
    ``c_in - 2 * popcount(x XOR w)``; taps landing in the zero padding
    are excluded through a validity mask, then each tap is weighted by
    its pixel's scale and the sum by the filter's ``alpha``.

    :returns: ``(batch, c_out, out_h, out_w)``.
    """
    if not isinstance(input, SignActivations):
        raise ContractViolation("binary_conv2d needs 1-bit activations")
    _check(input.bits.shape, weight, geom)
    p, c_in = geom.padding, geom.in_channels
    words = _pad_hw(input.bits.words, p)
    scale = _pad_hw(input.scale, p)
    valid = _pad_hw(np.ones((1, geom.in_h, geom.in_w), dtype=bool), p)
    mask = tail_mask(c_in)
    filters = weight.sign_bits.words

    batch = input.scale.shape[0]
    acc = np.zeros((batch, geom.out_h, geom.out_w, geom.out_channels))
    chunks = _chunks(batch * geom.out_h * geom.out_w, mask.size,
                     geom.out_channels)
    for i, j, tap in _taps(geom):
        x = words[tap][..., None, :]
        pixel_scale = np.where(valid[tap], scale[tap], 0)[..., None]
        for chunk in chunks:
            diff = popcount((x ^ filters[chunk, i, j]) & mask).sum(
                axis=-1, dtype=np.int32)
            acc[..., chunk] += (c_in - 2 * diff) * pixel_scale
    out = acc * weight.alpha.astype(np.float64)
    dtype = np.result_type(input.scale, weight.alpha)
    return out.transpose(0, 3, 1, 2).astype(dtype)


def bitsliced_conv2d(input: BitplaneCodes, weight: BinarizedWeight,
                     geom: ConvGeometry, q: QuantSpec) -> Tensor:
    """Fixed-point convolution of k-bit activations with binary weights.

    Each output element is ``alpha * step * sum_t 2^t * (popcount(w+ AND
    plane_t) - popcount(w- AND plane_t))`` where ``w+``/``w-`` select the
    positive/negative weights; zero padding holds code 0 and therefore
    contributes nothing.

    :returns: ``(batch, c_out, out_h, out_w)``.
    """
    if not isinstance(input, BitplaneCodes):
        raise ContractViolation("bitsliced_conv2d needs k-bit activation codes")
    k = len(input.planes)
    if k == 1 or q.k == 1:
        raise ContractViolation("1-bit activations go through binary_conv2d")
    if k > 8 or k != q.k:
        raise ContractViolation(f"bit-sliced kernels support 1 < k <= 8, got {k}")
    _check(input.planes[0].shape, weight, geom)
    if geom.reduction * q.levels >= 1 << 31:
        raise ContractViolation("accumulator would overflow 32 bits")

    p = geom.padding
    mask = tail_mask(geom.in_channels)
    positive = weight.sign_bits.words & mask
    negative = ~weight.sign_bits.words & mask
    planes = [_pad_hw(plane.words, p) for plane in input.planes]

    batch = planes[0].shape[0]
    acc = np.zeros((batch, geom.out_h, geom.out_w, geom.out_channels),
                   dtype=np.int32)
    chunks = _chunks(batch * geom.out_h * geom.out_w, mask.size,
                     geom.out_channels)
    for i, j, tap in _taps(geom):
        for t, plane in enumerate(planes):
            x = plane[tap][..., None, :]
            for chunk in chunks:
                pos = popcount(x & positive[chunk, i, j]).sum(
                    axis=-1, dtype=np.int32)
                neg = popcount(x & negative[chunk, i, j]).sum(
                    axis=-1, dtype=np.int32)
                acc[..., chunk] += (pos - neg) << t
    dtype = np.result_type(input.dtype, weight.alpha)
    scale = weight.alpha.astype(np.float64) * input.step
    return (acc * scale).transpose(0, 3, 1, 2).astype(dtype)
