"""Error types shared across the package, with their CLI exit codes."""

from typing import Iterable, Optional


class CtxLearnError(Exception):
    """Base class for every error raised on purpose by ctxlearn."""

    exit_code = 1


class ConfigError(CtxLearnError, ValueError):
    """Invalid configuration or an operation used outside its contract."""

    exit_code = 2


class ShapeError(CtxLearnError, ValueError):
    """Tensor shapes do not fit the operation."""

    exit_code = 2


class DegenerateMaskError(ConfigError):
    """A mask plan leaves nothing to predict."""


class DataError(CtxLearnError):
    """Bad data content: unknown ids, duplicate vocabulary entries, missing files."""

    exit_code = 3


class DataFormatError(DataError):
    """Malformed binary input."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericFaultError(CtxLearnError, ArithmeticError):
    """A NaN or Inf reached a check barrier."""

    exit_code = 4

    def __init__(self, where: str, detail: str = ""):
        message = f"non-finite values produced by {where}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.where = where


class StructuralError(CtxLearnError):
    """Two parameter sets that must line up do not."""

    exit_code = 2

    def __init__(self, message: str, missing: Iterable[str] = (), unexpected: Iterable[str] = ()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        parts = [message]
        if self.missing:
            parts.append(f"missing: {', '.join(self.missing)}")
        if self.unexpected:
            parts.append(f"unexpected: {', '.join(self.unexpected)}")
        super().__init__("; ".join(parts))
