"""
    bnexpand.errors
    ~~~~~~~~~~~~~~~

    Exceptions raised by :mod:`bnexpand`. Every class derives from
    :class:`Error` *and* from the builtin it refines, so callers which
    only care about, say, :class:`ValueError` don't need to import
    anything from here.

    >>> issubclass(DimensionError, ValueError)
    True

    :copyright: (c) 2026 by bnexpand authors and contributors.
    :license: LGPL, see LICENSE for more details.
"""
from __future__ import annotations

import os


class Error(Exception):
    """Base class for all :mod:`bnexpand` errors."""


class DimensionError(Error, ValueError):
    """A tensor has the wrong shape along a named axis.

    :param str axis: name of the offending axis, for example ``"channel"``.
    :param expected: what the operation needed.
    :param actual: what it got.
    """
    def __init__(self, axis: str, expected: object, actual: object,
                 what: str = "tensor") -> None:
        self.axis = axis
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{what}: {axis} mismatch, expected {expected}, got {actual}")


class ContractViolation(Error, RuntimeError):
    """An operation was called outside of its contract, e.g. packing
    off-grid activations or running backward without a forward."""


class PretrainRequired(ContractViolation):
    """Binary-activation training was started without an initialization
    checkpoint from a higher-precision run."""


class SpecError(Error, ValueError):
    """A model spec or a run configuration is invalid."""


class ParseError(Error, ValueError):
    """A file could not be parsed.

    :param path: file being parsed.
    :param int offset: byte offset at which parsing failed.
    """
    def __init__(self, path: str | os.PathLike[str], offset: int,
                 message: str) -> None:
        self.path = os.fspath(path)
        self.offset = offset
        super().__init__(f"{self.path}: at byte {offset}: {message}")


class CheckpointError(ParseError):
    """A checkpoint or packed model has a bad header or the wrong spec."""


class NonFiniteError(Error, FloatingPointError):
    """A NaN or an infinity showed up in a gradient.

    :param str name: the parameter whose gradient is not finite.
    """
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")
