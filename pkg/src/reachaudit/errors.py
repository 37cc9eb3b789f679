"""Exception hierarchy shared by every module."""


class ReachError(Exception):
    """Base class for all errors raised by reachaudit."""

    code = "error"


class DomainError(ReachError, ValueError):
    """An argument lies outside the domain of the operation."""

    code = "domain"


class DataError(ReachError, ValueError):
    """Input data violates a dataset invariant (duplicates, empty result...)."""

    code = "data"


class ParseError(DataError):
    """A line of an input file could not be parsed."""

    code = "parse"

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(ReachError, ArithmeticError):
    """A numerical routine produced a non-finite or singular result."""

    code = "numeric"
