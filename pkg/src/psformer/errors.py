"""Exception hierarchy shared by every module."""


class PSFormerError(Exception):
    """Base class for all library errors."""


class DimensionError(PSFormerError):
    """Tensor extents do not satisfy an operation's shape contract."""


class ContractError(PSFormerError):
    """A precondition other than a shape constraint was violated."""


class DegeneracyError(PSFormerError):
    """A normalization sum collapsed to zero (e.g. a fully masked row)."""


class NumericError(PSFormerError):
    """A forward operation produced NaN or infinite values."""


class ConfigError(PSFormerError):
    """An invalid or inconsistent configuration."""


class ParseError(PSFormerError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(PSFormerError):
    """A binary payload does not match its declared format."""
