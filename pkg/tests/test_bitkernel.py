import numpy as np
import pytest

from bnexpand.bitkernel import (
    WORD_BITS,
    BitplaneCodes,
    SignActivations,
    binary_conv2d,
    bitsliced_conv2d,
    pack_activations,
    pack_bits,
    popcount,
    tail_mask,
    unpack_bits,
    word_count,
    xnor_popcount_dot,
)
from bnexpand.errors import ContractViolation, DimensionError
from bnexpand.quant import (
    QuantSpec,
    binarize_activation_dense,
    binarize_activation_xnor,
    binarize_weights,
    quantize_activation,
)
from bnexpand.tensor import ConvGeometry, conv2d_ref


# Test helpers.

def random_geometry(rng):
    kernel = int(rng.integers(1, 4))
    padding = int(rng.integers(0, kernel))
    return ConvGeometry(
        in_channels=int(rng.choice([1, 3, 17, 63, 64, 65, 130])),
        out_channels=int(rng.integers(1, 9)),
        kernel_h=kernel, kernel_w=kernel,
        stride=int(rng.integers(1, 3)), padding=padding,
        in_h=int(rng.integers(kernel, 9)), in_w=int(rng.integers(kernel, 9)))


def check_binary(rng):
    geom = random_geometry(rng)
    x = rng.standard_normal((int(rng.integers(1, 3)), geom.in_channels,
                             geom.in_h, geom.in_w))
    weight = binarize_weights(rng.standard_normal(geom.weight_shape))
    packed = binarize_activation_xnor(x)
    expected = conv2d_ref(packed.dequantize(), weight.dequantize(), geom)
    np.testing.assert_allclose(binary_conv2d(packed, weight, geom), expected,
                               rtol=1e-4, atol=1e-9)


def check_bitsliced(rng, k):
    q = QuantSpec(k=k, beta=float(rng.uniform(0.5, 2.0)))
    geom = random_geometry(rng)
    y = quantize_activation(
        rng.uniform(-0.5, q.beta * 1.2,
                    (int(rng.integers(1, 3)), geom.in_channels, geom.in_h,
                     geom.in_w)), q)
    weight = binarize_weights(rng.standard_normal(geom.weight_shape))
    codes = pack_activations(y, q)
    expected = conv2d_ref(y, weight.dequantize(), geom)
    np.testing.assert_allclose(bitsliced_conv2d(codes, weight, geom, q),
                               expected, rtol=1e-4, atol=1e-9)


# Tests.

@pytest.mark.parametrize("n", [1, 63, 64, 65, 200])
def test_pack_roundtrip(n):
    bits = np.random.default_rng(n).random((3, n)) < 0.5
    packed = pack_bits(bits)
    assert packed.words.shape == (3, word_count(n))
    assert packed.words.dtype == np.uint64
    assert np.array_equal(unpack_bits(packed), bits)


def test_pack_layout():
    bits = np.zeros(70, dtype=bool)
    bits[[0, 3, 64, 69]] = True
    words = pack_bits(bits).words
    assert int(words[0]) == 0b1001
    assert int(words[1]) == (1 << 0) | (1 << 5)


def test_tail_mask():
    assert tail_mask(64).tolist() == [2 ** 64 - 1]
    assert tail_mask(65).tolist() == [2 ** 64 - 1, 1]
    assert tail_mask(3).tolist() == [7]


def test_popcount():
    words = np.array([0, 1, 2 ** 64 - 1, 0b1011], dtype=np.uint64)
    assert popcount(words).tolist() == [0, 1, 64, 3]


@pytest.mark.parametrize("n", [1, 7, 64, 100])
def test_xnor_dot_matches_float(n):
    rng = np.random.default_rng(n)
    a = rng.random(n) < 0.5
    b = rng.random(n) < 0.5
    expected = int((np.where(a, 1, -1) * np.where(b, 1, -1)).sum())
    assert xnor_popcount_dot(pack_bits(a), pack_bits(b)) == expected


def test_xnor_dot_ignores_tail_bits():
    a = pack_bits(np.ones(3, dtype=bool))
    b = pack_bits(np.ones(3, dtype=bool))
    dirty = a._replace(words=a.words | np.uint64(1 << 40))
    assert xnor_popcount_dot(dirty, b) == 3


@pytest.mark.parametrize("n", [1, 64, 100])
def test_xnor_dot_with_complement(n):
    a = np.random.default_rng(n).random(n) < 0.5
    assert xnor_popcount_dot(pack_bits(a), pack_bits(~a)) == -n


def test_xnor_dot_length_mismatch():
    with pytest.raises(DimensionError):
        xnor_popcount_dot(pack_bits(np.ones(3, dtype=bool)),
                          pack_bits(np.ones(4, dtype=bool)))


def test_pack_activations_rejects_off_grid():
    q = QuantSpec(k=2)
    y = quantize_activation(np.random.default_rng(0).random((1, 2, 3, 3)), q)
    y[0, 1, 2, 2] = 0.5
    with pytest.raises(ContractViolation):
        pack_activations(y, q)


def test_pack_activations_one_bit():
    y = binarize_activation_dense(
        np.random.default_rng(1).standard_normal((2, 5, 3, 3)))
    packed = pack_activations(y, QuantSpec(k=1))
    assert isinstance(packed, SignActivations)
    np.testing.assert_allclose(packed.dequantize(), y)

    y[0, 0, 0, 0] *= 2
    with pytest.raises(ContractViolation):
        pack_activations(y, QuantSpec(k=1))


def test_pack_activations_codes():
    q = QuantSpec(k=4, beta=1.5)
    y = quantize_activation(np.random.default_rng(2).random((1, 70, 2, 2)) * 2, q)
    codes = pack_activations(y, q)
    assert isinstance(codes, BitplaneCodes)
    assert len(codes.planes) == 4
    assert np.array_equal(codes.dequantize(), y)
    assert codes.codes().max() <= q.levels


def test_pack_activations_full_precision():
    with pytest.raises(ContractViolation):
        pack_activations(np.zeros((1, 1, 1, 1)), QuantSpec(k=32))


def test_binary_conv_known_value():
    geom = ConvGeometry(3, 1, 1, 1, in_h=1, in_w=1)
    x = np.array([1.0, -1.0, 1.0]).reshape(1, 3, 1, 1) * 2.0
    weight = binarize_weights(np.array([0.5, 0.5, -0.5]).reshape(1, 3, 1, 1))
    out = binary_conv2d(binarize_activation_xnor(x), weight, geom)
    assert out[0, 0, 0, 0] == pytest.approx(2.0 * 0.5 * -1)


def test_binary_conv_padding_contributes_nothing():
    geom = ConvGeometry(2, 1, 3, 3, padding=1, in_h=1, in_w=1)
    x = np.ones((1, 2, 1, 1))
    weight = binarize_weights(-np.ones((1, 2, 3, 3)))
    out = binary_conv2d(binarize_activation_xnor(x), weight, geom)
    assert out[0, 0, 0, 0] == pytest.approx(-2.0)


@pytest.mark.parametrize("seed", range(25))
def test_binary_conv_matches_reference(seed):
    check_binary(np.random.default_rng(seed))


@pytest.mark.parametrize("k", [2, 4])
@pytest.mark.parametrize("seed", range(25))
def test_bitsliced_conv_matches_reference(k, seed):
    check_bitsliced(np.random.default_rng(seed), k)


@pytest.mark.slow
def test_binary_conv_random_sweep():
    rng = np.random.default_rng(1000)
    for _ in range(1000):
        check_binary(rng)


@pytest.mark.slow
@pytest.mark.parametrize("k", [2, 4])
def test_bitsliced_conv_random_sweep(k):
    rng = np.random.default_rng(2000 + k)
    for _ in range(1000):
        check_bitsliced(rng, k)


def test_kernels_check_precision():
    geom = ConvGeometry(4, 2, 3, 3, padding=1, in_h=4, in_w=4)
    weight = binarize_weights(np.ones(geom.weight_shape))
    x = np.ones((1, 4, 4, 4))
    codes = pack_activations(quantize_activation(x, QuantSpec(k=2)), QuantSpec(k=2))
    signs = binarize_activation_xnor(x)

    with pytest.raises(ContractViolation):
        binary_conv2d(codes, weight, geom)
    with pytest.raises(ContractViolation):
        bitsliced_conv2d(signs, weight, geom, QuantSpec(k=2))
    with pytest.raises(ContractViolation):
        bitsliced_conv2d(codes, weight, geom, QuantSpec(k=1))


def test_kernels_check_geometry():
    geom = ConvGeometry(4, 2, 3, 3, padding=1, in_h=4, in_w=4)
    weight = binarize_weights(np.ones(geom.weight_shape))
    signs = binarize_activation_xnor(np.ones((1, 5, 4, 4)))
    with pytest.raises(DimensionError) as e:
        binary_conv2d(signs, weight, geom)
    assert e.value.axis == "channel"


def test_word_size():
    assert WORD_BITS == 64
    assert word_count(0) == 1
    assert word_count(64) == 1
    assert word_count(65) == 2


def dirty(packed, rng):
    garbage = rng.integers(0, np.iinfo(np.uint64).max, size=packed.words.shape,
                           dtype=np.uint64, endpoint=True)
    return packed._replace(
        words=packed.words | (garbage & ~tail_mask(packed.n_valid)))


@pytest.mark.parametrize("c_in", [3, 65])
def test_binary_conv_ignores_tail_bits(c_in):
    rng = np.random.default_rng(c_in)
    geom = ConvGeometry(c_in, 4, 3, 3, padding=1, in_h=5, in_w=5)
    signs = binarize_activation_xnor(rng.standard_normal((2, c_in, 5, 5)))
    weight = binarize_weights(rng.standard_normal(geom.weight_shape))
    clean = binary_conv2d(signs, weight, geom)
    out = binary_conv2d(signs._replace(bits=dirty(signs.bits, rng)),
                        weight._replace(sign_bits=dirty(weight.sign_bits, rng)),
                        geom)
    np.testing.assert_array_equal(out, clean)


@pytest.mark.parametrize("c_in", [3, 65])
def test_bitsliced_conv_ignores_tail_bits(c_in):
    rng = np.random.default_rng(c_in)
    q = QuantSpec(k=2)
    geom = ConvGeometry(c_in, 4, 3, 3, padding=1, in_h=5, in_w=5)
    codes = pack_activations(
        quantize_activation(rng.uniform(0, 1, (2, c_in, 5, 5)), q), q)
    weight = binarize_weights(rng.standard_normal(geom.weight_shape))
    clean = bitsliced_conv2d(codes, weight, geom, q)
    planes = tuple(dirty(plane, rng) for plane in codes.planes)
    out = bitsliced_conv2d(codes._replace(planes=planes),
                           weight._replace(sign_bits=dirty(weight.sign_bits, rng)),
                           geom, q)
    np.testing.assert_array_equal(out, clean)


BORDER = [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_binary_conv_padded_border():
    geom = ConvGeometry(1, 1, 3, 3, padding=1, in_h=3, in_w=3)
    weight = binarize_weights(np.ones(geom.weight_shape))
    out = binary_conv2d(binarize_activation_xnor(np.ones((1, 1, 3, 3))),
                        weight, geom)
    np.testing.assert_array_equal(out[0, 0], BORDER)


def test_bitsliced_conv_padded_border():
    q = QuantSpec(k=2)
    geom = ConvGeometry(1, 1, 3, 3, padding=1, in_h=3, in_w=3)
    weight = binarize_weights(np.ones(geom.weight_shape))
    codes = pack_activations(np.ones((1, 1, 3, 3)), q)
    np.testing.assert_allclose(bitsliced_conv2d(codes, weight, geom, q)[0, 0],
                               BORDER)


def test_bitsliced_conv_zero_codes():
    q = QuantSpec(k=4)
    geom = ConvGeometry(70, 3, 3, 3, padding=1, in_h=4, in_w=4)
    weight = binarize_weights(
        np.random.default_rng(0).standard_normal(geom.weight_shape))
    codes = pack_activations(np.zeros((2, 70, 4, 4)), q)
    assert not bitsliced_conv2d(codes, weight, geom, q).any()


def test_bitsliced_conv_top_code():
    q = QuantSpec(k=2, beta=1.5)
    geom = ConvGeometry(1, 1, 1, 1, in_h=1, in_w=1)
    weight = binarize_weights(np.ones(geom.weight_shape))
    codes = pack_activations(np.full((1, 1, 1, 1), 1.5), q)
    assert codes.codes().item() == 3
    assert bitsliced_conv2d(codes, weight, geom, q).item() == pytest.approx(1.5)
