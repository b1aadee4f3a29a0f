"""Exception types shared across the package."""


class PTDNetError(Exception):
    """Base class for all package errors."""


class DimensionError(PTDNetError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(PTDNetError, ValueError):
    """An input lies outside the domain of a function (e.g. log of a non-positive)."""


class ContractError(PTDNetError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericalError(PTDNetError, ArithmeticError):
    """A computation produced a non-finite value or failed to converge."""


class ParseError(PTDNetError, ValueError):
    """A data file is malformed."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class RangeError(PTDNetError, ValueError):
    """An index or count lies outside its admissible range."""


class ConfigError(PTDNetError, ValueError):
    """An experiment or generator configuration is invalid."""
