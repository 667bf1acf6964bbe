"""
    bnexpand.analysis
    ~~~~~~~~~~~~~~~~~

    Operation counts and memory of a model spec, and the speedup of binary
    over floating point convolution under the convention that one floating
    point multiply-accumulate costs as much as 64 binary operations.

    A binary convolution with ``M`` branches replaces
    ``A = c_in c_out w h w_in h_in`` multiply-accumulates by ``M A``
    binary operations plus ``M c_out w_out h_out`` floating point
    additions, so the speedup is::

        sigma = (64 / M) * A / (A + 64 c_out w_out h_out)

    >>> from bnexpand.tensor import ConvGeometry
    >>> geom = ConvGeometry(256, 256, 3, 3, padding=1, in_h=14, in_w=14)
    >>> round(speedup_ratio(geom, 5), 3)
    12.454

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
from __future__ import annotations

from typing import TYPE_CHECKING, Any, NamedTuple

from .arch import partition_space_size, spec_digest, spec_to_dict

if TYPE_CHECKING:
    from collections.abc import Iterable

    from .arch import ModelSpec
    from .tensor import ConvGeometry

#: Binary operations counted as one floating point operation.
BINARY_OPS_PER_FLOAT = 64

FLOAT_BITS = 32


class OpCount(NamedTuple):
    """Operations of one layer or of a whole model.

    :param int float_macs: floating point multiply-accumulates.
    :param int binary_ops: XNOR/AND plus popcount operations, one per
                           weight bit and activation bit plane.
    :param int fixed_adds: fixed-point shift-and-add of bit-plane partial
                           sums (``k > 1`` only).
    :param int float_adds: floating point additions aggregating branches.
    """
    float_macs: int = 0
    binary_ops: int = 0
    fixed_adds: int = 0
    float_adds: int = 0


def sum_counts(counts: Iterable[OpCount]) -> OpCount:
    return OpCount(*(sum(column) for column in zip(OpCount(), *counts)))


class LayerRow(NamedTuple):
    """One row of a :class:`Report`.

    :param str name: layer name, matching the model's parameter names
                     up to the base index.
    :param str kind: ``"float"``, ``"binary"`` or ``"aggregate"``.
    :param int branches: parallel copies of the layer.
    :param ops: operations of all copies together.
    :param int weight_bits: storage of all copies' weights.
    :param sigma: per-layer speedup, binary layers with ``k == 1`` only.
    """
    name: str
    kind: str
    branches: int
    ops: OpCount
    weight_bits: int = 0
    sigma: float | None = None


class Report(NamedTuple):
    """Complexity of a spec.

    :param rows: every layer in forward order.
    :param total: column sums of ``rows``.
    :param float sigma: whole-model speedup of the quantized layers.
    :param int packed_bytes: weight storage with binary layers packed.
    :param int float_bytes: weight storage of the full-precision network
                            with one branch per layer.
    :param int partitions: number of ways to group the spec's blocks.
    """
    rows: list[LayerRow]
    total: OpCount
    sigma: float
    packed_bytes: int
    float_bytes: int
    partitions: int


def _speedup_terms(geom: ConvGeometry) -> tuple[int, int]:
    reduction = geom.in_channels * geom.kernel_h * geom.kernel_w
    a = reduction * geom.out_channels * geom.in_h * geom.in_w
    return a, geom.out_channels * geom.out_h * geom.out_w


def speedup_ratio(geom: ConvGeometry, bases: int,
                  word: int = BINARY_OPS_PER_FLOAT) -> float:
    """Speedup of an ``M``-branch binary convolution over its floating
    point counterpart, for binary activations."""
    if bases < 1:
        raise ValueError(f"number of bases must be >= 1, got {bases}")
    a, aggregate = _speedup_terms(geom)
    return (word / bases) * a / (a + word * aggregate)


def abc_net_ratio(bases: int, weight_bases: int, activation_bases: int) -> float:
    """Binary convolutions of a network with ``weight_bases`` weight and
    ``activation_bases`` activation bases per layer, relative to one with
    ``bases`` bases.

    >>> abc_net_ratio(5, 5, 5)
    5.0
    """
    if min(bases, weight_bases, activation_bases) < 1:
        raise ValueError("base counts must be positive")
    return weight_bases * activation_bases / bases


def _macs(geom: ConvGeometry) -> int:
    return geom.reduction * geom.out_channels * geom.out_h * geom.out_w


def _float_row(name: str, geom: ConvGeometry, copies: int = 1) -> LayerRow:
    return LayerRow(name, "float", copies, OpCount(float_macs=copies * _macs(geom)),
                    copies * FLOAT_BITS * geom.reduction * geom.out_channels)


def _binary_row(spec: ModelSpec, name: str, geom: ConvGeometry, copies: int,
                layerwise: bool) -> LayerRow:
    q = spec.quant
    if q.full_precision:
        return _float_row(name, geom, copies)
    planes = q.k
    outputs = geom.out_channels * geom.out_h * geom.out_w
    ops = OpCount(
        binary_ops=copies * planes * _macs(geom),
        fixed_adds=copies * (planes - 1) * outputs,
        float_adds=spec.bases * outputs if layerwise else 0)
    bits = copies * (geom.reduction * geom.out_channels
                     + FLOAT_BITS * geom.out_channels)
    sigma = speedup_ratio(geom, copies) if q.k == 1 else None
    return LayerRow(name, "binary", copies, ops, bits, sigma)


def layer_rows(spec: ModelSpec) -> list[LayerRow]:
    """Per-layer counts of ``spec`` in forward order."""
    layerwise = spec.mode == "layerwise"
    blocks = spec.block_specs
    rows = [_float_row("stem.conv", spec.stem_geometry)]
    for p, group in enumerate(spec.groups):
        m = group.bases
        single = len(group.blocks) == 1 and blocks[group.blocks[0]].residual
        for z in group.blocks:
            block = blocks[z]
            for i, geom in enumerate(block.layers):
                rows.append(_binary_row(spec, f"groups.{p}.blocks.{z}.conv{i}",
                                        geom, m * spec.layer_branches, layerwise))
            if block.projection is not None:
                rows.append(_float_row(f"groups.{p}.blocks.{z}.shortcut",
                                       block.projection, 1 if single else m))
        if m > 1:
            c, h, w = blocks[group.blocks[-1]].output_shape
            rows.append(LayerRow(f"groups.{p}.aggregate", "aggregate", m,
                                 OpCount(float_adds=m * c * h * w)))
    features = spec.classifier_features
    rows.append(LayerRow("head", "float", 1,
                         OpCount(float_macs=features * spec.num_classes),
                         FLOAT_BITS * features * spec.num_classes))
    return rows


def _float_bytes(spec: ModelSpec) -> int:
    params = spec.stem_geometry.reduction * spec.stem.channels
    for block in spec.block_specs:
        for geom in block.layers:
            params += geom.reduction * geom.out_channels
        if block.projection is not None:
            params += block.projection.reduction * block.projection.out_channels
    params += spec.classifier_features * spec.num_classes
    return params * FLOAT_BITS // 8


def model_report(spec: ModelSpec, word: int = BINARY_OPS_PER_FLOAT) -> Report:
    """Operation counts, memory and speedup of ``spec``.

    The model speedup compares the floating point multiply-accumulates of
    the quantized layers, counted once, with the binary operations and
    aggregation additions spent on them. Fixed-point accumulations are
    reported but not folded in.
    """
    rows = layer_rows(spec)
    total = sum_counts(row.ops for row in rows)
    parent = sum(_macs(geom) for block in spec.block_specs for geom in block.layers)
    cost = total.binary_ops / word + total.float_adds
    if spec.quant.full_precision or not cost:
        sigma = 1.0
    else:
        sigma = parent / cost
    return Report(rows, total, sigma,
                  sum(row.weight_bits for row in rows) // 8,
                  _float_bytes(spec), partition_space_size(len(spec.blocks)))


def format_report(report: Report) -> str:
    """Plain-text table of ``report``."""
    header = ("layer", "kind", "M", "float MACs", "binary ops", "fixed adds",
              "float adds", "sigma")
    lines = [header]
    for row in report.rows:
        lines.append((row.name, row.kind, str(row.branches),
                      *(f"{value:,}" for value in row.ops),
                      "" if row.sigma is None else f"{row.sigma:.3f}"))
    lines.append(("total", "", "", *(f"{value:,}" for value in report.total),
                  f"{report.sigma:.3f}"))
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    out = ["  ".join(cell.ljust(width) if i < 2 else cell.rjust(width)
                     for i, (cell, width) in enumerate(zip(line, widths)))
           for line in lines]
    out.insert(1, "  ".join("-" * width for width in widths))
    out.append("")
    out.append(f"packed weights: {report.packed_bytes:,} bytes "
               f"(full precision: {report.float_bytes:,} bytes)")
    out.append(f"partition space: {report.partitions:,} groupings")
    return "\n".join(out)


def report_dict(spec: ModelSpec, report: Report) -> dict[str, Any]:
    """Machine-readable form of ``report``, keyed by the spec digest."""
    return {
        "spec": spec_to_dict(spec),
        "spec_digest": spec_digest(spec).hex(),
        "layers": [{"name": row.name, "kind": row.kind,
                    "branches": row.branches, **row.ops._asdict(),
                    "weight_bits": row.weight_bits, "sigma": row.sigma}
                   for row in report.rows],
        "total": report.total._asdict(),
        "sigma": report.sigma,
        "packed_bytes": report.packed_bytes,
        "float_bytes": report.float_bytes,
        "partitions": report.partitions,
    }
