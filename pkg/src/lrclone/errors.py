# src/lrclone/errors.py
"""Domain exceptions. Each subclasses the builtin a caller would naturally catch."""

from __future__ import annotations


class ShapeError(ValueError):
    """Operand shapes do not fit the operation."""


class ConfigError(ValueError):
    """Geometry, sharing or hyperparameter settings are inconsistent."""


class InputError(ValueError):
    """Caller-supplied data is out of range (token ids, corpus kinds)."""


class ContractError(RuntimeError):
    """A precondition of the compute graph or oracle harness was broken."""


class NonFiniteError(RuntimeError):
    """A loss or gradient went NaN/Inf during a training step."""


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ChecksumError(FormatError):
    pass
