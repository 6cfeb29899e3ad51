"""Exception types shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numeric 4).
"""


class UGTError(Exception):
    """Base class for all package errors."""


class ConfigError(UGTError, ValueError):
    """Invalid configuration, schema violation or checkpoint/config mismatch."""


class DataError(UGTError, ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    """A text file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class ShapeError(UGTError, ValueError):
    """Tensor operands have incompatible shapes."""


class NumericError(UGTError, FloatingPointError):
    """Non-finite values or divergence during computation."""
