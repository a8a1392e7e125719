"""Exception hierarchy shared by every veridip module."""


class VeridipError(Exception):
    """Base class for all errors raised by this package."""


class ArchitectureError(VeridipError, ValueError):
    pass


class ShapeError(VeridipError, ValueError):
    pass


class NumericInputError(VeridipError, ValueError):
    pass


class LabelError(VeridipError, ValueError):
    pass


class DataError(VeridipError, ValueError):
    pass


class ColumnNotFoundError(DataError):
    def __init__(self, column: str):
        super().__init__(f"column not found: {column!r}")
        self.column = column


class DivergenceError(VeridipError, ArithmeticError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss during training at epoch {epoch}")
        self.epoch = epoch


class ConfigError(VeridipError, ValueError):
    pass


class DomainError(VeridipError, ValueError):
    pass


class SampleSizeError(DomainError):
    pass


class InsufficientShadowsError(DomainError):
    pass


class CoverageError(DomainError):
    pass


class ParseError(VeridipError, ValueError):
    """Malformed model file."""


class BadMagicError(ParseError):
    pass


class VersionMismatchError(ParseError):
    pass


class TruncatedError(ParseError):
    pass


class ChecksumError(ParseError):
    pass


class ShapeInconsistencyError(ParseError):
    pass


class OracleError(VeridipError):
    pass


class OracleUnreachableError(OracleError):
    pass


class ProtocolError(OracleError):
    pass


class BudgetExceededError(OracleError):
    pass
