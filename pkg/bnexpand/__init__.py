"""
    bnexpand
    ~~~~~~~~

    `bnexpand` trains and runs convolutional networks with binary weights
    and low-bitwidth activations. Instead of quantizing a network layer by
    layer, it splits the network into groups of blocks and approximates
    every group by a few low-precision bases whose outputs are summed with
    learned scales.

    Three layers: :mod:`~bnexpand.quant` and :mod:`~bnexpand.bitkernel`,
    which binarize tensors and convolve them with XNOR and popcount;
    :mod:`~bnexpand.arch`, which builds expanded models from a declarative
    spec; and :mod:`~bnexpand.train`, which trains them with hand-written
    backward passes.

    >>> from bnexpand import build_model, load_spec
    >>> model = build_model(load_spec("cifar_resnet"), seed=0)
    >>> len(model.groups)
    6

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
__version__ = "0.1.0"

__all__ = ("ModelSpec", "Model", "QuantSpec", "build_model", "load_spec",
           "fit", "FitConfig", "model_report")

from .analysis import model_report
from .arch import Model, ModelSpec, build_model, load_spec
from .quant import QuantSpec
from .train import FitConfig, fit
