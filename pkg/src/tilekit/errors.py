"""Exception hierarchy shared by the kernel, tuner and CLI layers."""

from __future__ import annotations


class TilekitError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(TilekitError, ValueError):
    """Operand dimensions disagree with the declared problem shape."""


class ConfigError(TilekitError, ValueError):
    """A kernel configuration does not fit the device budgets."""

    def __init__(self, message: str, verdict=None):
        super().__init__(message)
        self.verdict = verdict


class CapabilityError(TilekitError, NotImplementedError):
    """The requested algorithm variant is not supported."""


class ContractError(TilekitError, ValueError):
    """A function was called outside its documented precondition."""


class ResourceError(TilekitError, MemoryError):
    """Buffers for a benchmark could not be allocated."""


class TuningError(TilekitError, RuntimeError):
    """No configuration survived enumeration or verification."""

    def __init__(self, message: str, diagnostics: dict[str, str] | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ParseError(TilekitError, ValueError):
    """Malformed text input (tuning DB, layer tables, config names)."""

    def __init__(self, message: str, line: int | None = None, column: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{', '.join(loc)}: {message}" if loc else message)
        self.line = line
        self.column = column
