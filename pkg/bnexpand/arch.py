"""
    bnexpand.arch
    ~~~~~~~~~~~~~

    Model construction. A network is a full-precision stem, ``Z`` quantized
    blocks partitioned into ``P`` contiguous groups, and a full-precision
    classifier. Each group is approximated by ``M`` homogeneous low-precision
    bases whose outputs are summed with learned scales:

    * a group of one residual block computes ``sum_i theta_i phi_i(x) + x``,
      the skip added once outside the bases;
    * a group of several blocks computes ``sum_i theta_i u_i(...u_i(x))``,
      every ``u(x) = phi(x) + x`` carrying its own skip;
    * in layer-wise mode every quantized convolution is itself expanded
      into ``sum_i lambda_i f_i(x)``.

    Specs are declarative (:class:`ModelSpec`, read from JSON with
    :func:`load_spec`), :func:`build_model` turns one into a :class:`Model`.
    Every unit of a model implements its own backward pass; caches for it
    are kept only by forward passes run with ``train=True``.

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np

from . import quant as qz
from .bitkernel import binary_conv2d, bitsliced_conv2d, pack_activations
from .errors import ContractViolation, DimensionError, SpecError
from .quant import QuantSpec
from .tensor import (
    BatchNormState,
    ConvGeometry,
    Tensor,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_ref,
    conv2d_ref_backward,
    global_avgpool,
    global_avgpool_backward,
    linear_backward,
    linear_ref,
    maxpool2d,
    out_size,
    pool2d_backward,
)

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping, Sequence

    from .quant import BinarizedWeight

#: Block kinds understood by :func:`build_model`.
BLOCK_KINDS = ("basic", "bottleneck", "plain", "dense")

#: Expansion modes.
MODES = ("groupwise", "layerwise", "ensemble")

#: Named partitions accepted in place of an explicit group list.
VARIANTS = ("v1", "v2", "v3", "layerwise")

#: Inference engines; ``"packed"`` runs the bit kernels.
ENGINES = ("reference", "packed")

#: Directory holding the bundled desk-scale specs.
SPEC_DIR = Path(__file__).parent / "specs"

_BOTTLENECK_REDUCTION = 4


# Specs.
# ......

class StemSpec(NamedTuple):
    """Full-precision first convolution, optionally max-pooled."""
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: int = 0


class BlockDecl(NamedTuple):
    """One block as written in a spec file.

    :param str kind: one of :data:`BLOCK_KINDS`; ``"dense"`` is a
                     convolution whose kernel covers its whole input.
    :param int channels: output channels.
    :param int stride: stride of the block's spatial convolution.
    :param int kernel: kernel size of ``"plain"`` blocks.
    :param int padding: padding of ``"plain"`` blocks.
    :param int pool: max-pool size applied after a ``"plain"`` block.
    """
    kind: str
    channels: int
    stride: int = 1
    kernel: int = 3
    padding: int = 1
    pool: int = 0


class BlockSpec(NamedTuple):
    """A block with its geometry resolved.

    :param str kind: block kind.
    :param layers: geometry of every quantized convolution, in order.
    :param projection: full-precision 1x1 skip projection of residual
                       blocks that change shape, ``None`` otherwise.
    :param int pool: max-pool size after the block, ``0`` for none.
    """
    kind: str
    layers: tuple[ConvGeometry, ...]
    projection: ConvGeometry | None = None
    pool: int = 0

    @property
    def residual(self) -> bool:
        return self.kind in ("basic", "bottleneck")

    @property
    def downsample(self) -> bool:
        return self.projection is not None

    @property
    def output_shape(self) -> tuple[int, int, int]:
        last = self.layers[-1]
        h, w = last.out_h, last.out_w
        if self.pool:
            h, w = out_size(h, self.pool, self.pool, 0), out_size(w, self.pool, self.pool, 0)
        return last.out_channels, h, w


class GroupSpec(NamedTuple):
    """Contiguous run of blocks approximated by ``bases`` bases.

    The learned per-base scales live in the :class:`Model`.
    """
    blocks: tuple[int, ...]
    bases: int


class ModelSpec(NamedTuple):
    """Declarative description of a network; mirrors the JSON schema.

    :param str name: free-form label.
    :param input_shape: ``(channels, height, width)`` of one sample.
    :param int num_classes: classifier outputs.
    :param stem: full-precision first layer.
    :param blocks: the ``Z`` quantized blocks.
    :param partition: number of blocks in each group, summing to ``Z``.
    :param int bases: ``M``, bases per group (or branches per layer in
                      layer-wise mode).
    :param str mode: one of :data:`MODES`.
    :param quant: activation quantizer.
    """
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    stem: StemSpec
    blocks: tuple[BlockDecl, ...]
    partition: tuple[int, ...]
    bases: int = 1
    mode: str = "groupwise"
    quant: QuantSpec = QuantSpec()

    @property
    def residual(self) -> bool:
        """Residual networks average-pool into the classifier and leave
        the last group's output unquantized."""
        return any(b.kind in ("basic", "bottleneck") for b in self.blocks)

    @property
    def stem_geometry(self) -> ConvGeometry:
        c, h, w = self.input_shape
        s = self.stem
        return ConvGeometry(c, s.channels, s.kernel, s.kernel, s.stride,
                            s.padding, h, w)

    @property
    def stem_output_shape(self) -> tuple[int, int, int]:
        g = self.stem_geometry
        h, w, pool = g.out_h, g.out_w, self.stem.pool
        if pool:
            h, w = out_size(h, pool, pool, 0), out_size(w, pool, pool, 0)
        return g.out_channels, h, w

    @property
    def block_specs(self) -> tuple[BlockSpec, ...]:
        shape = self.stem_output_shape
        specs = []
        for decl in self.blocks:
            spec = resolve_block(decl, shape)
            specs.append(spec)
            shape = spec.output_shape
        return tuple(specs)

    @property
    def groups(self) -> tuple[GroupSpec, ...]:
        bases = 1 if self.mode == "layerwise" else self.bases
        groups, start = [], 0
        for size in self.partition:
            groups.append(GroupSpec(tuple(range(start, start + size)), bases))
            start += size
        return tuple(groups)

    @property
    def layer_branches(self) -> int:
        return self.bases if self.mode == "layerwise" else 1

    @property
    def features_shape(self) -> tuple[int, int, int]:
        return self.block_specs[-1].output_shape if self.blocks \
            else self.stem_output_shape

    @property
    def classifier_features(self) -> int:
        c, h, w = self.features_shape
        return c if self.residual else c * h * w

    def validate(self) -> None:
        """Raise :exc:`~bnexpand.errors.SpecError` unless the spec
        describes a buildable network."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"bad input shape {self.input_shape}")
        if self.num_classes < 2:
            raise SpecError("need at least two classes")
        if self.mode not in MODES:
            raise SpecError(f"unknown expansion mode {self.mode!r}")
        if self.bases < 1:
            raise SpecError(f"number of bases must be >= 1, got {self.bases}")
        try:
            self.quant.validate()
        except ValueError as e:
            raise SpecError(str(e)) from None
        if not self.blocks:
            raise SpecError("a model needs at least one quantized block")
        for decl in self.blocks:
            if decl.kind not in BLOCK_KINDS:
                raise SpecError(f"unknown block kind {decl.kind!r}")
            if decl.pool and decl.kind != "plain":
                raise SpecError("only plain blocks may pool")

        z = len(self.blocks)
        if any(size < 1 for size in self.partition) or sum(self.partition) != z:
            raise SpecError(
                f"partition {list(self.partition)} does not cover {z} blocks")
        if self.mode == "ensemble" and self.partition != (z,):
            raise SpecError("ensemble mode needs a single group of all blocks")
        if self.mode == "layerwise" and any(s != 1 for s in self.partition):
            raise SpecError("layer-wise mode needs one block per group")

        try:
            self.stem_geometry.validate()
            for spec in self.block_specs:
                for geom in spec.layers:
                    geom.validate()
        except ValueError as e:
            raise SpecError(str(e)) from None
        if self.stem_output_shape[1] < 1 or min(self.features_shape) < 1:
            raise SpecError("pooling leaves an empty feature map")


def resolve_block(decl: BlockDecl, shape: tuple[int, int, int]) -> BlockSpec:
    """Resolve ``decl`` against the ``(channels, height, width)`` of its
    input."""
    c, h, w = shape
    out, s = decl.channels, decl.stride
    layers: list[ConvGeometry] = []
    if decl.kind == "basic":
        layers.append(ConvGeometry(c, out, 3, 3, s, 1, h, w))
        first = layers[0]
        layers.append(ConvGeometry(out, out, 3, 3, 1, 1, first.out_h, first.out_w))
    elif decl.kind == "bottleneck":
        mid = max(1, out // _BOTTLENECK_REDUCTION)
        layers.append(ConvGeometry(c, mid, 1, 1, 1, 0, h, w))
        layers.append(ConvGeometry(mid, mid, 3, 3, s, 1, h, w))
        middle = layers[1]
        layers.append(ConvGeometry(mid, out, 1, 1, 1, 0, middle.out_h, middle.out_w))
    elif decl.kind == "plain":
        layers.append(ConvGeometry(c, out, decl.kernel, decl.kernel, s,
                                   decl.padding, h, w))
    elif decl.kind == "dense":
        layers.append(ConvGeometry(c, out, h, w, 1, 0, h, w))
    else:
        raise SpecError(f"unknown block kind {decl.kind!r}")

    projection = None
    if decl.kind in ("basic", "bottleneck") and (s != 1 or c != out):
        projection = ConvGeometry(c, out, 1, 1, s, 0, h, w)
    return BlockSpec(decl.kind, tuple(layers), projection, decl.pool)


def variant_partition(z: int, variant: str) -> tuple[tuple[int, ...], str]:
    """Partition and mode of a named variant over ``z`` blocks.

    >>> variant_partition(4, "v1")
    ((1, 1, 1, 1), 'groupwise')
    >>> variant_partition(4, "v2")
    ((2, 2), 'groupwise')
    >>> variant_partition(4, "v3")
    ((4,), 'ensemble')
    """
    if z < 1:
        raise SpecError("need at least one block")
    if variant == "v1":
        return (1,) * z, "groupwise"
    elif variant == "v2":
        return (2,) * (z // 2) + (1,) * (z % 2), "groupwise"
    elif variant == "v3":
        return (z,), "ensemble"
    elif variant == "layerwise":
        return (1,) * z, "layerwise"
    raise SpecError(f"unknown variant {variant!r}, expected one of {VARIANTS}")


def partition_space_size(z: int) -> int:
    """Number of ways to cut ``z`` blocks into contiguous groups.

    >>> partition_space_size(4)
    8
    """
    if z < 1:
        raise ValueError("need at least one block")
    return int(2 ** (z - 1))


def enumerate_partitions(z: int) -> Iterator[tuple[int, ...]]:
    """Yield every contiguous partition of ``z`` blocks as group sizes.

    >>> list(enumerate_partitions(3))
    [(3,), (1, 2), (2, 1), (1, 1, 1)]
    """
    for cuts in range(partition_space_size(z)):
        sizes, run = [], 1
        for i in range(z - 1):
            if cuts >> i & 1:
                sizes.append(run)
                run = 1
            else:
                run += 1
        sizes.append(run)
        yield tuple(sizes)


# Spec files.
# ...........

def spec_from_dict(config: Mapping[str, Any]) -> ModelSpec:
    """Build and validate a :class:`ModelSpec` from parsed JSON."""
    try:
        blocks = tuple(BlockDecl(**block) for block in config["blocks"])
        groups = config.get("groups", "v1")
        mode = config.get("mode")
        if isinstance(groups, str):
            partition, implied = variant_partition(len(blocks), groups)
            mode = mode or implied
        else:
            partition = tuple(int(size) for size in groups)
        spec = ModelSpec(
            name=str(config.get("name", "model")),
            input_shape=tuple(config["input"]),  # type: ignore[arg-type]
            num_classes=int(config["classes"]),
            stem=StemSpec(**config["stem"]),
            blocks=blocks,
            partition=partition,
            bases=int(config.get("bases", 1)),
            mode=mode or "groupwise",
            quant=QuantSpec(**config.get("quant", {})))
    except (KeyError, TypeError) as e:
        raise SpecError(f"malformed spec: {e}") from None
    spec.validate()
    return spec


def spec_to_dict(spec: ModelSpec) -> dict[str, Any]:
    return {
        "name": spec.name,
        "input": list(spec.input_shape),
        "classes": spec.num_classes,
        "stem": spec.stem._asdict(),
        "blocks": [block._asdict() for block in spec.blocks],
        "groups": list(spec.partition),
        "bases": spec.bases,
        "mode": spec.mode,
        "quant": spec.quant._asdict(),
    }


def dump_spec(spec: ModelSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2, sort_keys=True)


def spec_digest(spec: ModelSpec) -> bytes:
    """SHA-256 of the canonical JSON form of ``spec``."""
    canonical = json.dumps(spec_to_dict(spec), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).digest()


def load_spec(source: str | os.PathLike[str]) -> ModelSpec:
    """Read a spec from a JSON file, or one of the bundled specs by name
    (``"mnist_plain"``, ``"cifar_resnet"``).
    """
    path = Path(source)
    if not path.exists() and not path.suffix:
        path = SPEC_DIR / f"{path.name}.json"
    try:
        with open(path, encoding="utf-8") as handle:
            config = json.load(handle)
    except FileNotFoundError:
        raise SpecError(f"no such spec: {os.fspath(source)}") from None
    except json.JSONDecodeError as e:
        raise SpecError(f"{path}: {e}") from None
    return spec_from_dict(config)


def override_spec(spec: ModelSpec, *, bases: int | None = None,
                  k: int | None = None, beta: float | None = None,
                  variant: str | None = None) -> ModelSpec:
    """Copy of ``spec`` with command-line overrides applied and validated."""
    if bases is not None:
        spec = spec._replace(bases=bases)
    if k is not None or beta is not None:
        spec = spec._replace(quant=spec.quant._replace(
            **{name: value for name, value in (("k", k), ("beta", beta))
               if value is not None}))
    if variant is not None:
        partition, mode = variant_partition(len(spec.blocks), variant)
        spec = spec._replace(partition=partition, mode=mode)
    spec.validate()
    return spec


# Units.
# ......

class Param:
    """A trainable tensor and its gradient.

    :param str name: dotted name, also the checkpoint key.
    :param value: the tensor, updated in place by the optimizer.
    :param bool decay: whether weight decay applies.
    """
    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: Tensor, decay: bool = False) -> None:
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...],
             dtype: Any) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Unit:
    """Something with a forward and a hand-written backward pass."""

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def children(self) -> Sequence[Unit]:
        return ()

    def own_params(self) -> Sequence[Param]:
        return ()

    def own_buffers(self) -> Sequence[tuple[str, Tensor]]:
        return ()

    def walk(self) -> Iterator[Unit]:
        yield self
        for child in self.children():
            yield from child.walk()

    def _cached(self, attr: str) -> Any:
        try:
            return getattr(self, attr)
        except AttributeError:
            raise ContractViolation(
                f"{type(self).__name__}.backward without a training forward"
            ) from None


class Sequential(Unit):
    """Units applied in order; remembers its output when training."""

    def __init__(self, units: Sequence[Unit]) -> None:
        self.units = list(units)

    def children(self) -> Sequence[Unit]:
        return self.units

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        for unit in self.units:
            x = unit.forward(x, train)
        if train:
            self.output = x
        return x

    def backward(self, grad: Tensor) -> Tensor:
        for unit in reversed(self.units):
            grad = unit.backward(grad)
        return grad


class Identity(Unit):
    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        return x

    def backward(self, grad: Tensor) -> Tensor:
        return grad


class BatchNorm(Unit):
    def __init__(self, name: str, channels: int, dtype: Any) -> None:
        self.name = name
        self.state = BatchNormState(channels, dtype)
        self.gamma = Param(f"{name}.gamma", self.state.gamma)
        self.delta = Param(f"{name}.delta", self.state.delta)

    def own_params(self) -> Sequence[Param]:
        return (self.gamma, self.delta)

    def own_buffers(self) -> Sequence[tuple[str, Tensor]]:
        return ((f"{self.name}.running_mean", self.state.running_mean),
                (f"{self.name}.running_var", self.state.running_var))

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        y, cache = batchnorm_forward(x, self.state, train)
        if train:
            self._cache = cache
        return y

    def backward(self, grad: Tensor) -> Tensor:
        grad_input, grad_gamma, grad_delta = batchnorm_backward(
            grad, self._cached("_cache"))
        self.gamma.grad += grad_gamma
        self.delta.grad += grad_delta
        return grad_input


class Activation(Unit):
    """Activation quantizer with a straight-through backward."""

    def __init__(self, quant: QuantSpec) -> None:
        self.quant = quant

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if train:
            self._input = x
        return qz.activation(x, self.quant)

    def backward(self, grad: Tensor) -> Tensor:
        return qz.activation_backward(grad, self._cached("_input"), self.quant)


class MaxPool(Unit):
    def __init__(self, size: int) -> None:
        self.size = size

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        y, cache = maxpool2d(x, self.size)
        if train:
            self._cache = cache
        return y

    def backward(self, grad: Tensor) -> Tensor:
        return pool2d_backward(grad, self._cached("_cache"))


class FullConv(Unit):
    """Full-precision convolution: the stem and skip projections."""

    def __init__(self, name: str, geometry: ConvGeometry,
                 rng: np.random.Generator, dtype: Any) -> None:
        self.geometry = geometry
        self.weight = Param(f"{name}.weight",
                            _kaiming(rng, geometry.weight_shape, dtype),
                            decay=True)

    def own_params(self) -> Sequence[Param]:
        return (self.weight,)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if train:
            self._input = x
        return conv2d_ref(x, self.weight.value, self.geometry)

    def backward(self, grad: Tensor) -> Tensor:
        grad_input, grad_weight = conv2d_ref_backward(
            grad, self._cached("_input"), self.weight.value, self.geometry)
        self.weight.grad += grad_weight
        return grad_input


class BinaryBranch(Unit):
    """One low-precision convolution ``f``: binary weights applied to
    quantized activations.

    With the ``"packed"`` engine inference runs on
    :func:`~bnexpand.bitkernel.binary_conv2d` (``k == 1``) or
    :func:`~bnexpand.bitkernel.bitsliced_conv2d` (``k > 1``); training
    always uses the reference convolution on dequantized values.
    """

    def __init__(self, name: str, geometry: ConvGeometry, quant: QuantSpec,
                 rng: np.random.Generator, dtype: Any) -> None:
        self.name = name
        self.geometry = geometry
        self.quant = quant
        self.weight = Param(f"{name}.weight",
                            _kaiming(rng, geometry.weight_shape, dtype),
                            decay=True)
        self.engine = "reference"
        #: Binarized weights loaded from a packed export, if any.
        self.frozen: BinarizedWeight | None = None

    def own_params(self) -> Sequence[Param]:
        return (self.weight,)

    def binarized(self) -> BinarizedWeight:
        return self.frozen or qz.binarize_weights(self.weight.value)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        w = self.weight.value
        if self.quant.full_precision:
            b = w
        elif self.frozen is not None:
            b = self.frozen.dequantize()
        else:
            b = qz.binarize_weights_dense(w)

        if self.engine == "packed" and not train and not self.quant.full_precision:
            packed = pack_activations(x, self.quant)
            if self.quant.k == 1:
                y = binary_conv2d(packed, self.binarized(),  # type: ignore[arg-type]
                                  self.geometry)
            else:
                y = bitsliced_conv2d(packed, self.binarized(),  # type: ignore[arg-type]
                                     self.geometry, self.quant)
        else:
            y = conv2d_ref(x, b, self.geometry)
        if train:
            self._cache = (x, b)
            self.output = y
        return y

    def backward(self, grad: Tensor) -> Tensor:
        x, b = self._cached("_cache")
        grad_input, grad_b = conv2d_ref_backward(grad, x, b, self.geometry)
        self.weight.grad += qz.binarize_weights_backward(grad_b)
        return grad_input


def aggregate(outputs: Sequence[Tensor], scales: Tensor) -> Tensor:
    """``sum_i scales[i] * outputs[i]``, summed in index order."""
    total = scales[0] * outputs[0]
    for scale, output in zip(scales[1:], outputs[1:]):
        total = total + scale * output
    return total


def _run_bases(x: Tensor, bases: Sequence[Unit], train: bool,
               workers: int) -> list[Tensor]:
    if workers > 1 and len(bases) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda base: base.forward(x, train), bases))
    return [base.forward(x, train) for base in bases]


def _check_scales(scales: Tensor, count: int) -> None:
    if scales.shape != (count,):
        raise DimensionError("bases", count, scales.shape, "scales")


def layerwise_forward(x: Tensor, branches: Sequence[BinaryBranch],
                      scales: Tensor, train: bool = False,
                      workers: int = 1) -> Tensor:
    """``sum_i lambda_i f_i(x)`` over branches sharing one geometry."""
    _check_scales(scales, len(branches))
    first = branches[0].geometry
    for branch in branches[1:]:
        if branch.geometry != first:
            raise DimensionError("geometry", first, branch.geometry, "branch")
    return aggregate(_run_bases(x, branches, train, workers), scales)


def group_forward_single(x: Tensor, bases: Sequence[Unit], scales: Tensor,
                         shortcut: Unit | None = None, train: bool = False,
                         workers: int = 1) -> Tensor:
    """``sum_i theta_i phi_i(x) + x`` for a group of one residual block;
    ``shortcut`` projects ``x`` when the block changes shape.
    """
    _check_scales(scales, len(bases))
    total = aggregate(_run_bases(x, bases, train, workers), scales)
    skip = x if shortcut is None else shortcut.forward(x, train)
    if skip.shape != total.shape:
        raise DimensionError("skip", total.shape, skip.shape)
    return total + skip


def group_forward_multi(x: Tensor, bases: Sequence[Sequential], scales: Tensor,
                        train: bool = False, workers: int = 1) -> Tensor:
    """``sum_i theta_i u_i(...u_i(x))``; skips live inside each ``u``."""
    _check_scales(scales, len(bases))
    depth = len(bases[0].units)
    for base in bases[1:]:
        if len(base.units) != depth:
            raise DimensionError("chain length", depth, len(base.units), "base")
    return aggregate(_run_bases(x, bases, train, workers), scales)


class QuantConv(Unit):
    """A quantized convolution: one branch, or ``M`` branches with
    learned ``lambda`` in layer-wise mode."""

    def __init__(self, name: str, geometry: ConvGeometry, quant: QuantSpec,
                 branches: int, layerwise: bool, rng: np.random.Generator,
                 dtype: Any) -> None:
        self.geometry = geometry
        self.workers = 1
        if layerwise:
            self.branches = [
                BinaryBranch(f"{name}.branches.{i}", geometry, quant, rng, dtype)
                for i in range(branches)]
            self.scales: Param | None = Param(
                f"{name}.lambda", np.full(branches, 1 / branches, dtype=dtype))
        else:
            self.branches = [BinaryBranch(name, geometry, quant, rng, dtype)]
            self.scales = None

    def children(self) -> Sequence[Unit]:
        return self.branches

    def own_params(self) -> Sequence[Param]:
        return () if self.scales is None else (self.scales,)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if self.scales is None:
            return self.branches[0].forward(x, train)
        return layerwise_forward(x, self.branches, self.scales.value, train,
                                 self.workers)

    def backward(self, grad: Tensor) -> Tensor:
        if self.scales is None:
            return self.branches[0].backward(grad)
        scales = self.scales.value
        grad_input = None
        for i, branch in enumerate(self.branches):
            self.scales.grad[i] += np.vdot(grad, branch._cached("output"))
            g = branch.backward(scales[i] * grad)
            grad_input = g if grad_input is None else grad_input + g
        assert grad_input is not None
        return grad_input


def _block(name: str, spec: BlockSpec, quant: QuantSpec, branches: int,
           layerwise: bool, rng: np.random.Generator, dtype: Any) -> Sequential:
    """``phi``: conv, batch norm and quantizer for every layer, the last
    layer left unquantized."""
    units: list[Unit] = []
    for i, geom in enumerate(spec.layers):
        units.append(QuantConv(f"{name}.conv{i}", geom, quant, branches,
                               layerwise, rng, dtype))
        units.append(BatchNorm(f"{name}.bn{i}", geom.out_channels, dtype))
        if i < len(spec.layers) - 1:
            units.append(Activation(quant))
    if spec.pool:
        units.append(MaxPool(spec.pool))
    return Sequential(units)


def _shortcut(name: str, spec: BlockSpec, rng: np.random.Generator,
              dtype: Any) -> Unit:
    if spec.projection is None:
        return Identity()
    return Sequential([FullConv(f"{name}.conv", spec.projection, rng, dtype),
                       BatchNorm(f"{name}.bn", spec.projection.out_channels,
                                 dtype)])


class ResidualUnit(Unit):
    """``u(x) = phi(x) + shortcut(x)``; plain blocks have no shortcut."""

    def __init__(self, block: Sequential, shortcut: Unit | None) -> None:
        self.block = block
        self.shortcut = shortcut

    def children(self) -> Sequence[Unit]:
        return (self.block,) if self.shortcut is None \
            else (self.block, self.shortcut)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        y = self.block.forward(x, train)
        if self.shortcut is not None:
            y = y + self.shortcut.forward(x, train)
        return y

    def backward(self, grad: Tensor) -> Tensor:
        grad_input = self.block.backward(grad)
        if self.shortcut is not None:
            grad_input = grad_input + self.shortcut.backward(grad)
        return grad_input


class Group(Unit):
    """``M`` homogeneous bases over a contiguous run of blocks, their
    outputs aggregated with ``theta`` and, unless this is the last group
    of a residual network, quantized again.
    """

    def __init__(self, name: str, spec: GroupSpec,
                 blocks: Sequence[BlockSpec], model: ModelSpec,
                 quantize_output: bool, rng: np.random.Generator,
                 dtype: Any) -> None:
        self.name = name
        quant, m = model.quant, spec.bases
        layerwise = model.mode == "layerwise"
        branches = model.layer_branches
        self.single = len(blocks) == 1 and blocks[0].residual
        self.shortcut: Unit | None = None
        self.bases: list[Sequential] = []
        if self.single:
            for i in range(m):
                self.bases.append(_block(f"{name}.bases.{i}", blocks[0], quant,
                                         branches, layerwise, rng, dtype))
            self.shortcut = _shortcut(f"{name}.shortcut", blocks[0], rng, dtype)
        else:
            for i in range(m):
                units: list[Unit] = []
                for j, block in enumerate(blocks):
                    prefix = f"{name}.bases.{i}.blocks.{j}"
                    phi = _block(prefix, block, quant, branches, layerwise,
                                 rng, dtype)
                    skip = _shortcut(f"{prefix}.shortcut", block, rng, dtype) \
                        if block.residual else None
                    units.append(ResidualUnit(phi, skip))
                    if j < len(blocks) - 1:
                        units.append(Activation(quant))
                self.bases.append(Sequential(units))

        topology = [_topology(base) for base in self.bases]
        if any(t != topology[0] for t in topology):
            raise SpecError(f"{name}: bases are not homogeneous")

        self.trainable_theta = not layerwise
        self.theta = Param(f"{name}.theta", np.full(m, 1 / m, dtype=dtype))
        self.output = Activation(quant) if quantize_output else None
        self.mask_theta_grad = False
        self.workers = 1

    def children(self) -> Sequence[Unit]:
        units: list[Unit] = list(self.bases)
        if self.shortcut is not None:
            units.append(self.shortcut)
        if self.output is not None:
            units.append(self.output)
        return units

    def own_params(self) -> Sequence[Param]:
        return (self.theta,) if self.trainable_theta else ()

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if self.single:
            s = group_forward_single(x, self.bases, self.theta.value,
                                     self.shortcut, train, self.workers)
        else:
            s = group_forward_multi(x, self.bases, self.theta.value, train,
                                    self.workers)
        if self.output is not None:
            s = self.output.forward(s, train)
        return s

    def backward(self, grad: Tensor) -> Tensor:
        grad_s = grad if self.output is None else self.output.backward(grad)
        # theta sees the quantized output's gradient as is unless masking
        # was asked for.
        grad_theta = grad_s if self.mask_theta_grad else grad
        theta = self.theta.value
        grad_input = None
        for i, base in enumerate(self.bases):
            if self.trainable_theta:
                self.theta.grad[i] += np.vdot(base._cached("output"), grad_theta)
            g = base.backward(theta[i] * grad_s)
            grad_input = g if grad_input is None else grad_input + g
        assert grad_input is not None
        if self.shortcut is not None:
            grad_input = grad_input + self.shortcut.backward(grad_s)
        return grad_input


def _topology(unit: Unit) -> list[Any]:
    return [getattr(u, "geometry", type(u).__name__) for u in unit.walk()]


class Head(Unit):
    """Full-precision classifier; residual networks average-pool first."""

    def __init__(self, features: int, classes: int, pool: bool,
                 rng: np.random.Generator, dtype: Any) -> None:
        self.pool = pool
        weight = rng.standard_normal((classes, features)) / np.sqrt(features)
        self.weight = Param("head.weight", weight.astype(dtype), decay=True)

    def own_params(self) -> Sequence[Param]:
        return (self.weight,)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        features = global_avgpool(x) if self.pool else x.reshape(x.shape[0], -1)
        if train:
            self._cache = (x.shape, features)
        return linear_ref(features, self.weight.value)

    def backward(self, grad: Tensor) -> Tensor:
        shape, features = self._cached("_cache")
        grad_features, grad_weight = linear_backward(grad, features,
                                                     self.weight.value)
        self.weight.grad += grad_weight
        if self.pool:
            return global_avgpool_backward(grad_features, shape)
        return grad_features.reshape(shape)


# Models.
# .......

class Model:
    """A built network.

    :param spec: the spec it was built from.
    :param stem: full-precision stem, ending in the input quantizer.
    :param groups: the ``P`` groups.
    :param head: full-precision classifier.

    .. attribute:: token

       Incremented by every training forward; a backward pass must carry
       the token of the latest one.
    """

    def __init__(self, spec: ModelSpec, stem: Sequential, groups: Sequence[Group],
                 head: Head, dtype: Any = np.float32) -> None:
        self.spec = spec
        self.stem = stem
        self.groups = list(groups)
        self.head = head
        self.dtype = np.dtype(dtype)
        self.token = 0
        self._pending = False
        self._engine = "reference"
        self._workers = 1

    def __repr__(self) -> str:
        return (f"{self.__class__.__name__}({self.spec.name!r}, "
                f"P={len(self.groups)}, M={self.spec.bases})")

    def units(self) -> Iterator[Unit]:
        yield from self.stem.walk()
        for group in self.groups:
            yield from group.walk()
        yield from self.head.walk()

    def parameters(self) -> list[Param]:
        return [p for unit in self.units() for p in unit.own_params()]

    def buffers(self) -> list[tuple[str, Tensor]]:
        return [b for unit in self.units() for b in unit.own_buffers()]

    def branches(self) -> list[BinaryBranch]:
        return [u for u in self.units() if isinstance(u, BinaryBranch)]

    @property
    def engine(self) -> str:
        return self._engine

    @engine.setter
    def engine(self, engine: str) -> None:
        if engine not in ENGINES:
            raise ValueError(f"unknown engine {engine!r}")
        self._engine = engine
        for branch in self.branches():
            branch.engine = engine

    @property
    def workers(self) -> int:
        return self._workers

    @workers.setter
    def workers(self, workers: int) -> None:
        self._workers = max(1, workers)
        for unit in self.units():
            if isinstance(unit, (Group, QuantConv)):
                unit.workers = self._workers

    @property
    def mask_theta_grad(self) -> bool:
        return all(group.mask_theta_grad for group in self.groups)

    @mask_theta_grad.setter
    def mask_theta_grad(self, mask: bool) -> None:
        for group in self.groups:
            group.mask_theta_grad = mask

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        x = self.stem.forward(x, train)
        for group in self.groups:
            x = group.forward(x, train)
        logits = self.head.forward(x, train)
        if train:
            self.token += 1
            self._pending = True
        return logits

    def backward(self, grad_logits: Tensor, token: int) -> None:
        if not self._pending or token != self.token:
            raise ContractViolation(
                "backward does not match the latest training forward")
        self._pending = False
        for p in self.parameters():
            p.grad[...] = 0
        grad = self.head.backward(grad_logits)
        for group in reversed(self.groups):
            grad = group.backward(grad)
        self.stem.backward(grad)

    def state_dict(self) -> dict[str, Tensor]:
        """Copies of every parameter and buffer, by name."""
        state = {p.name: p.value.copy() for p in self.parameters()}
        state.update((name, value.copy()) for name, value in self.buffers())
        return state

    def load_state_dict(self, state: Mapping[str, Tensor],
                        strict: bool = True) -> None:
        targets = {p.name: p.value for p in self.parameters()}
        targets.update(self.buffers())
        missing = [name for name in targets if name not in state]
        if strict and missing:
            raise SpecError(f"state is missing {missing[:3]}")
        for name, target in targets.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise DimensionError("shape", target.shape, value.shape, name)
            target[...] = value


def build_model(spec: ModelSpec, seed: int = 0, dtype: Any = np.float32) -> Model:
    """Instantiate ``spec`` with weights drawn deterministically from
    ``seed``.

    :param dtype: floating point type of every parameter and activation.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    stem_units: list[Unit] = [
        FullConv("stem.conv", spec.stem_geometry, rng, dtype),
        BatchNorm("stem.bn", spec.stem.channels, dtype)]
    if spec.stem.pool:
        stem_units.append(MaxPool(spec.stem.pool))
    stem_units.append(Activation(spec.quant))

    blocks = spec.block_specs
    groups = []
    for p, group in enumerate(spec.groups):
        last = p == len(spec.groups) - 1
        groups.append(Group(f"groups.{p}", group,
                            [blocks[z] for z in group.blocks], spec,
                            quantize_output=not (last and spec.residual),
                            rng=rng, dtype=dtype))
    head = Head(spec.classifier_features, spec.num_classes, spec.residual,
                rng, dtype)
    return Model(spec, Sequential(stem_units), groups, head, dtype)
