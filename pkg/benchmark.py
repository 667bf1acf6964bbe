"""
    benchmark
    ~~~~~~~~~

    A simple script timing the bit kernels against the reference
    convolution on a 256-channel 3x3 layer at 14x14.

    Example run::

        $ python benchmark.py -o results.json
        .....................
        binary_conv2d: Mean +- std dev: 23.1 ms +- 0.4 ms

    Set ``BENCHMARK_BITS`` to a comma-separated list of activation
    bitwidths to time (default ``1,2``).

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""

import os
import sys
from functools import partial

try:
    from pyperf import Runner
except ImportError:
    sys.exit("``pyperf`` not found. Try installing it via ``pip install pyperf``.")

import numpy as np

from bnexpand.bitkernel import binary_conv2d, bitsliced_conv2d, pack_activations
from bnexpand.quant import (
    QuantSpec,
    binarize_activation_xnor,
    binarize_weights,
    quantize_activation,
)
from bnexpand.tensor import ConvGeometry, conv2d_ref

GEOMETRY = ConvGeometry(256, 256, 3, 3, padding=1, in_h=14, in_w=14)


def make_benchmarks(k, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 256, 14, 14)).astype(np.float32)
    weight = binarize_weights(rng.standard_normal(GEOMETRY.weight_shape)
                              .astype(np.float32))
    if k == 1:
        signs = binarize_activation_xnor(x)
        dense = signs.dequantize()
        fast = partial(binary_conv2d, signs, weight, GEOMETRY)
        name = "binary_conv2d"
    else:
        q = QuantSpec(k=k)
        dense = quantize_activation(x, q)
        fast = partial(bitsliced_conv2d, pack_activations(dense, q), weight,
                       GEOMETRY, q)
        name = f"bitsliced_conv2d[k={k}]"
    reference = partial(conv2d_ref, dense, weight.dequantize(), GEOMETRY)
    return [(name, fast), (f"conv2d_ref[k={k}]", reference)]


if __name__ == "__main__":
    bits = [int(k) for k in os.environ.get("BENCHMARK_BITS", "1,2").split(",")]
    sys.argv.extend(["--inherit-environ", "BENCHMARK_BITS"])

    runner = Runner()

    for k in bits:
        for name, func in make_benchmarks(k):
            runner.bench_func(name, func)
