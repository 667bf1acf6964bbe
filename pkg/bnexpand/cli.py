"""
    bnexpand.cli
    ~~~~~~~~~~~~

    Command-line interface::

        $ python -m bnexpand inspect --spec cifar_resnet
        $ python -m bnexpand train --spec mnist_plain --data ~/data/mnist --out runs/m3
        $ python -m bnexpand export --spec mnist_plain --checkpoint runs/m3/best.ckpt
        $ python -m bnexpand eval --spec mnist_plain --checkpoint runs/m3/model.bnx

    Every command exits with status ``0`` on success and ``1`` with a one
    line diagnostic on any :class:`~bnexpand.errors.Error`.

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from functools import partial
from pathlib import Path
from typing import TYPE_CHECKING, Callable, NamedTuple

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from .analysis import format_report, model_report, report_dict, speedup_ratio
from .arch import (
    VARIANTS,
    Model,
    build_model,
    enumerate_partitions,
    load_spec,
    override_spec,
    spec_digest,
)
from .bitkernel import binary_conv2d, bitsliced_conv2d, pack_activations
from .data import DATA_ENV, load_dataset, synthetic
from .errors import Error
from .quant import binarize_activation_xnor, binarize_weights, quantize_activation
from .tensor import conv2d_ref
from .train import FitConfig, evaluate, fit

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .arch import ModelSpec
    from .data import Splits
    from .tensor import ConvGeometry

logger = logging.getLogger("bnexpand")

METRICS_COLUMNS = ("epoch", "lr", "train_loss", "test_top1", "seconds")

_DATASETS = {(1, 28, 28): "mnist", (3, 32, 32): "cifar10"}
_EPOCHS = {(1, 28, 28): 30, (3, 32, 32): 60}


class RunConfig(NamedTuple):
    """Everything a command needs, parsed from the command line."""
    command: str
    spec: str
    dataset: str | None = None
    data: str | None = None
    bases: int | None = None
    abits: int | None = None
    beta: float | None = None
    variant: str | None = None
    lr: float | None = None
    epochs: int | None = None
    batch_size: int = 128
    seed: int = 0
    resume: str | None = None
    pretrained: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    engine: str = "reference"
    workers: int = 1
    timing: bool = True
    repeats: int = 5
    list_partitions: bool = False
    verbose: int = 0


def resolve_spec(config: RunConfig) -> ModelSpec:
    """Load the spec and apply the overrides, validating the result."""
    return override_spec(load_spec(config.spec), bases=config.bases,
                         k=config.abits, beta=config.beta,
                         variant=config.variant)


def _dataset(config: RunConfig, spec: ModelSpec) -> Splits:
    name = config.dataset or _DATASETS.get(spec.input_shape)
    if name == "synthetic":
        return synthetic(512, spec.input_shape, spec.num_classes, config.seed,
                         test_count=256)
    elif name is None:
        raise Error(f"no dataset for inputs of shape {spec.input_shape}, "
                    "pass --dataset")
    return load_dataset(name, config.data)


def _load_model(config: RunConfig, spec: ModelSpec) -> Model:
    if config.checkpoint is None:
        raise Error("--checkpoint is required")
    path = Path(config.checkpoint)
    with open(path, "rb") as handle:
        magic = handle.read(len(ckpt.PACKED_MAGIC))
    if magic == ckpt.PACKED_MAGIC:
        model = ckpt.load_packed(path, spec, config.engine)
    else:
        model = build_model(spec, config.seed)
        ckpt.restore(model, ckpt.load_checkpoint(path, spec))
        model.engine = config.engine
    _set_workers(model, config.workers)
    return model


def _set_workers(model: Model, workers: int) -> None:
    bases = max(model.spec.bases, model.spec.layer_branches)
    if workers > bases:
        warnings.warn(f"--workers {workers} exceeds the {bases} bases per "
                      "group; extra threads stay idle", stacklevel=2)
    model.workers = workers


def _no_clock() -> float:
    return 0.0


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(config: RunConfig) -> int:
    """Train a model; write checkpoints, ``metrics.csv`` and
    ``summary.json`` to ``--out``."""
    spec = resolve_spec(config)
    splits = _dataset(config, spec)
    logger.info("training %s: %d groups, M=%d, k=%d", spec.name,
                len(spec.partition), spec.bases, spec.quant.k)
    out = _out_dir(config)

    pretrained = None
    if config.pretrained is not None:
        pretrained = ckpt.load_checkpoint(config.pretrained)
    resume = None
    if config.resume is not None:
        resume = ckpt.load_checkpoint(config.resume, spec)

    clock: Callable[[], float] = time.perf_counter if config.timing else _no_clock
    fit_config = FitConfig(
        epochs=config.epochs or _EPOCHS.get(splits.train.sample_shape, 30),
        batch_size=config.batch_size,
        lr=config.lr, seed=config.seed, pretrained=pretrained,
        checkpoint_dir=out, clock=clock)

    model = build_model(spec, config.seed)
    _set_workers(model, config.workers)
    result = fit(model, splits.train, splits.test, fit_config, resume)

    metrics = out / "metrics.csv"
    append = resume is not None and metrics.exists()
    with open(metrics, "a" if append else "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        if not append:
            writer.writerow(METRICS_COLUMNS)
        for record in result.records:
            writer.writerow((record.epoch, repr(record.lr),
                             repr(record.train_loss), repr(record.test_top1),
                             f"{record.seconds:.3f}"))

    summary = {
        "spec": spec.name,
        "spec_digest": spec_digest(spec).hex(),
        "seed": config.seed,
        "epochs": result.state.epoch,
        "best_test_top1": max(result.state.accuracies, default=None),
        "final_lr": result.records[-1].lr if result.records else None,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                      encoding="utf-8")
    print(f"{spec.name}: best test top-1 {summary['best_test_top1']} "
          f"after {result.state.epoch} epochs, written to {out}")
    return 0


def cmd_eval(config: RunConfig) -> int:
    """Report single-crop top-1 and top-5 accuracy of a checkpoint or a
    packed model on the test split."""
    spec = resolve_spec(config)
    model = _load_model(config, spec)
    metrics = evaluate(model, _dataset(config, spec).test)
    print(f"top-1 {metrics.top1:.4f}  top-5 {metrics.top5:.4f}  "
          f"loss {metrics.loss:.4f}")
    return 0


def _time(func: Callable[[], object], repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        func()
        best = min(best, time.perf_counter() - start)
    return best


def bench_layer(geom: ConvGeometry, spec: ModelSpec, repeats: int = 5,
                seed: int = 0) -> tuple[float, float]:
    """Seconds per call of the reference and of the bit kernel on one
    sample of ``geom``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, geom.in_channels, geom.in_h, geom.in_w))
    weight = binarize_weights(rng.standard_normal(geom.weight_shape))
    q = spec.quant
    fast: Callable[[], object]
    if q.k == 1:
        signs = binarize_activation_xnor(x)
        y = signs.dequantize()
        fast = partial(binary_conv2d, signs, weight, geom)
    else:
        y = quantize_activation(x, q)
        codes = pack_activations(y, q)
        fast = partial(bitsliced_conv2d, codes, weight, geom, q)
    reference = partial(conv2d_ref, y, weight.dequantize(), geom)
    return _time(reference, repeats), _time(fast, repeats)


def cmd_bench(config: RunConfig) -> int:
    """Time the bit kernels against the reference convolution on every
    distinct quantized layer shape of the spec, next to the predicted
    speedup for binary activations."""
    spec = resolve_spec(config)
    if spec.quant.full_precision:
        raise Error("nothing to benchmark in a full-precision spec")
    seen = []
    for block in spec.block_specs:
        seen.extend(geom for geom in block.layers if geom not in seen)

    print(f"{'layer':<36}{'reference':>12}{'binary':>12}{'measured':>10}"
          f"{'predicted':>11}")
    for geom in seen:
        reference, fast = bench_layer(geom, spec, config.repeats, config.seed)
        shape = (f"{geom.in_channels}x{geom.in_h}x{geom.in_w} -> "
                 f"{geom.out_channels} k{geom.kernel_h}s{geom.stride}")
        predicted = f"{speedup_ratio(geom, 1):.2f}" if spec.quant.k == 1 else "-"
        print(f"{shape:<36}{reference * 1e3:>10.2f}ms{fast * 1e3:>10.2f}ms"
              f"{reference / fast:>10.2f}{predicted:>11}")
    return 0


def cmd_inspect(config: RunConfig) -> int:
    """Print the complexity report and the partition space of the spec."""
    spec = resolve_spec(config)
    report = model_report(spec)
    print(format_report(report))
    if config.list_partitions:
        for partition in enumerate_partitions(len(spec.blocks)):
            print(" ".join(map(str, partition)))
    if config.out is not None:
        path = _out_dir(config) / "report.json"
        path.write_text(json.dumps(report_dict(spec, report), indent=2) + "\n",
                        encoding="utf-8")
    return 0


def cmd_export(config: RunConfig) -> int:
    """Convert a checkpoint into a packed inference model."""
    spec = resolve_spec(config)
    model = _load_model(config, spec)
    path = Path(config.out or Path(config.checkpoint or ".").with_suffix(".bnx"))
    if path.suffix != ".bnx":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "model.bnx"
    size = ckpt.export_packed(model, path)
    print(f"wrote {path} ({size:,} bytes)")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
    "export": cmd_export,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", required=True,
                        help="spec file or bundled spec name")
    common.add_argument("--bases", type=int, help="override the number of bases M")
    common.add_argument("--abits", type=int, help="override the activation bitwidth k")
    common.add_argument("--beta", type=float, help="override the clip bound")
    common.add_argument("--variant", choices=VARIANTS, help="override the grouping")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory or file")
    common.add_argument("-v", "--verbose", action="count", default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--dataset", choices=("mnist", "cifar10", "synthetic"))
    data.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--checkpoint", help="checkpoint or packed model")
    model.add_argument("--engine", choices=("reference", "packed"),
                       default="reference")
    model.add_argument("--workers", type=int, default=1,
                       help="threads running the bases of a group")

    parser = argparse.ArgumentParser(
        prog="bnexpand",
        description="Train, inspect and run group-wise expanded binary networks.")
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", parents=[common, data],
                                help=cmd_train.__doc__)
    train.add_argument("--lr", type=float)
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int, default=128)
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("--pretrained",
                       help="higher-precision checkpoint to start from")
    train.add_argument("--workers", type=int, default=1)
    train.add_argument("--no-timing", dest="timing", action="store_false",
                       help="write 0 to the seconds column of the metrics log")

    commands.add_parser("eval", parents=[common, data, model], help=cmd_eval.__doc__)
    commands.add_parser("export", parents=[common, model], help=cmd_export.__doc__)

    bench = commands.add_parser("bench", parents=[common], help=cmd_bench.__doc__)
    bench.add_argument("--repeats", type=int, default=5)

    inspect = commands.add_parser("inspect", parents=[common], help=cmd_inspect.__doc__)
    inspect.add_argument("--list-partitions", action="store_true")
    return parser


def parse_args(argv: Sequence[str] | None = None) -> RunConfig:
    namespace = make_parser().parse_args(argv)
    fields = {name: value for name, value in vars(namespace).items()
              if name in RunConfig._fields}
    return RunConfig(**fields)


def main(argv: Sequence[str] | None = None) -> int:
    config = parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(config.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[config.command](config)
    except (Error, OSError) as e:
        print(f"bnexpand: error: {e}", file=sys.stderr)
        return 1
