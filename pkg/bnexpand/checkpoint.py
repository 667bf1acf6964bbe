"""
    bnexpand.checkpoint
    ~~~~~~~~~~~~~~~~~~~

    Binary file formats: training checkpoints and packed inference models.

    Both start with an 8-byte magic, a little-endian ``uint32`` format
    version and the 32-byte SHA-256 digest of the model spec. A checkpoint
    then holds the epoch counter and a list of named tensors; a packed
    model holds the full-precision tensors and, for every binary layer,
    its sign bits as 64-bit words plus one ``float32`` scale per filter.
    The exact layout is documented in ``docs/formats.rst``.

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
from __future__ import annotations

import logging
import os
import struct
from pathlib import Path
from typing import TYPE_CHECKING, Any, NamedTuple

import numpy as np
import numpy.typing as npt

from .arch import build_model, spec_digest
from .bitkernel import PackedBits
from .errors import CheckpointError
from .quant import BinarizedWeight

if TYPE_CHECKING:
    from collections.abc import Mapping

    from .arch import Model, ModelSpec

logger = logging.getLogger(__name__)

MAGIC = b"BNXCKPT\x00"
PACKED_MAGIC = b"BNXPACK\x00"
VERSION = 1

#: Element type codes of tensor records; model tensors are always ``<f4``.
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {dtype: code for code, dtype in DTYPES.items()}

_DIGEST_OFFSET = len(MAGIC) + 4


class Checkpoint(NamedTuple):
    """Named tensors of a model plus training state.

    Model tensors are keyed by parameter name; training state lives under
    ``train.`` and optimizer velocities under ``optim.``.
    """
    digest: bytes
    epoch: int
    tensors: dict[str, npt.NDArray[Any]]

    def model_state(self) -> dict[str, npt.NDArray[Any]]:
        return {name: value for name, value in self.tensors.items()
                if not name.startswith(("train.", "optim."))}


class _Writer:
    def __init__(self, magic: bytes, digest: bytes) -> None:
        self.parts = [magic, struct.pack("<I", VERSION), digest]

    def u32(self, value: int) -> None:
        self.parts.append(struct.pack("<I", value))

    def name(self, name: str) -> None:
        encoded = name.encode("utf-8")
        self.parts.append(struct.pack("<H", len(encoded)))
        self.parts.append(encoded)

    def shape(self, shape: tuple[int, ...]) -> None:
        self.parts.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))

    def tensor(self, name: str, value: npt.NDArray[Any]) -> None:
        dtype = value.dtype.newbyteorder("<")
        if dtype not in _CODES:
            dtype = DTYPES[0]
        self.name(name)
        self.parts.append(struct.pack("<B", _CODES[dtype]))
        self.shape(value.shape)
        self.parts.append(np.ascontiguousarray(value, dtype=dtype).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, raw: bytes, path: str | os.PathLike[str]) -> None:
        self.raw = raw
        self.path = path
        self.offset = 0

    def error(self, message: str, offset: int | None = None) -> CheckpointError:
        return CheckpointError(self.path,
                               self.offset if offset is None else offset,
                               message)

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.raw):
            raise self.error("truncated file")
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def header(self, magic: bytes) -> bytes:
        if self.take(len(magic)) != magic:
            raise self.error("bad magic", 0)
        (version,) = self.unpack("I")
        if version != VERSION:
            raise self.error(f"unsupported version {version}", len(magic))
        return self.take(32)

    def name(self) -> str:
        (length,) = self.unpack("H")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise self.error("tensor name is not UTF-8") from None

    def shape(self) -> tuple[int, ...]:
        (ndim,) = self.unpack("B")
        return self.unpack(f"{ndim}I")

    def array(self, dtype: np.dtype[Any], shape: tuple[int, ...]) -> npt.NDArray[Any]:
        count = int(np.prod(shape))
        data = self.take(count * dtype.itemsize)
        return np.frombuffer(data, dtype=dtype).reshape(shape).copy()

    def tensor(self) -> tuple[str, npt.NDArray[Any]]:
        name = self.name()
        (code,) = self.unpack("B")
        if code not in DTYPES:
            raise self.error(f"unknown element type {code}", self.offset - 1)
        return name, self.array(DTYPES[code], self.shape())

    def done(self) -> None:
        if self.offset != len(self.raw):
            raise self.error("trailing bytes")


def _check_digest(reader: _Reader, digest: bytes, spec: ModelSpec | None) -> None:
    if spec is not None and digest != spec_digest(spec):
        raise reader.error("checkpoint was written for a different spec",
                           _DIGEST_OFFSET)


def snapshot(model: Model, epoch: int = 0,
             extra: Mapping[str, npt.NDArray[Any]] | None = None) -> Checkpoint:
    """Checkpoint of ``model``'s parameters and buffers, plus ``extra``
    training state tensors."""
    tensors = {name: value.astype(np.float32)
               for name, value in model.state_dict().items()}
    if extra:
        tensors.update((name, np.array(value)) for name, value in extra.items())
    return Checkpoint(spec_digest(model.spec), epoch, tensors)


def restore(model: Model, checkpoint: Checkpoint, strict: bool = True,
            check_spec: bool = True) -> None:
    """Load ``checkpoint``'s model tensors into ``model`` in place.

    :param strict: require every parameter and buffer to be present.
    :param check_spec: require the checkpoint to match ``model``'s spec;
                       off when initializing from a pretrained model of a
                       different bitwidth.
    """
    if check_spec and checkpoint.digest != spec_digest(model.spec):
        raise CheckpointError("<checkpoint>", _DIGEST_OFFSET,
                              "checkpoint was written for a different spec")
    model.load_state_dict(checkpoint.model_state(), strict=strict)


def dumps(checkpoint: Checkpoint) -> bytes:
    writer = _Writer(MAGIC, checkpoint.digest)
    writer.u32(checkpoint.epoch)
    writer.u32(len(checkpoint.tensors))
    for name in sorted(checkpoint.tensors):
        writer.tensor(name, checkpoint.tensors[name])
    return writer.getvalue()


def loads(raw: bytes, path: str | os.PathLike[str] = "<bytes>",
          spec: ModelSpec | None = None) -> Checkpoint:
    reader = _Reader(raw, path)
    digest = reader.header(MAGIC)
    _check_digest(reader, digest, spec)
    epoch, count = reader.unpack("II")
    tensors = dict(reader.tensor() for _ in range(count))
    reader.done()
    return Checkpoint(digest, epoch, tensors)


def save_checkpoint(checkpoint: Checkpoint, path: str | os.PathLike[str]) -> None:
    Path(path).write_bytes(dumps(checkpoint))
    logger.debug("wrote checkpoint for epoch %d to %s", checkpoint.epoch, path)


def load_checkpoint(path: str | os.PathLike[str],
                    spec: ModelSpec | None = None) -> Checkpoint:
    """Read a checkpoint, checking its spec digest against ``spec`` if
    given.

    :raises bnexpand.errors.CheckpointError: on a bad magic, version or
                                             digest, or a truncated file.
    """
    return loads(Path(path).read_bytes(), path, spec)


def export_packed(model: Model, path: str | os.PathLike[str]) -> int:
    """Write ``model`` as a packed inference model; return its size in
    bytes.

    Latent weights of binary layers are replaced by their sign bits and
    scales; everything else is kept as ``float32``.
    """
    binary = {} if model.spec.quant.full_precision else {
        branch.weight.name: branch for branch in model.branches()}
    floats = {name: value for name, value in model.state_dict().items()
              if name not in binary}

    writer = _Writer(PACKED_MAGIC, spec_digest(model.spec))
    writer.u32(len(floats))
    writer.u32(len(binary))
    for name in sorted(floats):
        writer.tensor(name, floats[name])
    for name in sorted(binary):
        weight = binary[name].binarized()
        writer.name(name)
        writer.shape(weight.shape)
        writer.parts.append(weight.alpha.astype("<f4").tobytes())
        writer.u32(weight.sign_bits.n_valid)
        writer.u32(weight.sign_bits.words.shape[-1])
        writer.parts.append(weight.sign_bits.words.astype("<u8").tobytes())
    raw = writer.getvalue()
    Path(path).write_bytes(raw)
    logger.debug("exported %d binary layers to %s (%d bytes)",
                 len(binary), path, len(raw))
    return len(raw)


def load_packed(path: str | os.PathLike[str], spec: ModelSpec,
                engine: str = "packed") -> Model:
    """Rebuild an inference model from :func:`export_packed` output.

    The binary layers run on the frozen sign bits and scales, so the
    result reproduces the exported model's logits exactly.
    """
    reader = _Reader(Path(path).read_bytes(), path)
    _check_digest(reader, reader.header(PACKED_MAGIC), spec)
    float_count, binary_count = reader.unpack("II")
    state = dict(reader.tensor() for _ in range(float_count))

    frozen = {}
    for _ in range(binary_count):
        name = reader.name()
        shape = reader.shape()
        if len(shape) != 4:
            raise reader.error(f"{name}: binary weights must have rank 4")
        c_out, c_in, kh, kw = shape
        alpha = reader.array(np.dtype("<f4"), (c_out,))
        n_valid, n_words = reader.unpack("II")
        if n_valid != c_in:
            raise reader.error(f"{name}: {n_valid} sign bits for {c_in} channels")
        words = reader.array(np.dtype("<u8"), (c_out, kh, kw, n_words))
        bits = PackedBits(words.astype(np.uint64), n_valid, (c_out, kh, kw, c_in))
        frozen[name] = BinarizedWeight(bits, alpha.astype(np.float32), shape)
    reader.done()

    model = build_model(spec)
    branches = {branch.weight.name: branch for branch in model.branches()}
    if set(frozen) != (set() if spec.quant.full_precision else set(branches)):
        raise reader.error("binary layers do not match the spec")
    for name, weight in frozen.items():
        branches[name].frozen = weight
        state[name] = weight.dequantize()
    model.load_state_dict(state)
    model.engine = engine
    return model
