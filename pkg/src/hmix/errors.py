"""Exception types shared across the package."""


class HmixError(Exception):
    """Base class for all package errors."""


class ShapeError(HmixError, ValueError):
    """Operand shapes are incompatible. The message names both shapes."""


class DomainError(HmixError, ValueError):
    """A value is outside an operation's domain (log of non-positive, div by zero, overflow)."""


class ContractError(HmixError, ValueError):
    """A value type's invariant is violated (non-simplex weights, bad bounds, bad index)."""


class ConfigError(HmixError, ValueError):
    """An invalid configuration (bad divisibility, unknown option, inconsistent sizes)."""


class ParseError(HmixError, ValueError):
    """An input file is malformed. The message names the line number."""


class TrainingAborted(HmixError, RuntimeError):
    """Training hit a non-finite loss; carries the path of the diagnostic dump."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path
