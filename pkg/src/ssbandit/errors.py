"""Exception hierarchy.

The CLI maps ``ConfigurationError``/``DataError`` to exit code 1 and
``OSError`` to exit code 2.
"""


class BanditError(Exception):
    """Base class for all library errors."""


class ConfigurationError(BanditError, ValueError):
    """Invalid hyperparameter or config file content."""


class DataError(BanditError, ValueError):
    """Malformed, non-finite or inconsistent input data."""


class FormatError(DataError):
    """A binary dataset file does not parse."""

    def __init__(self, message, offset=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.path = path


class ContractError(BanditError, ValueError):
    """A caller violated an operation's precondition."""


class NumericalIntegrityError(BanditError, ArithmeticError):
    """A quantity that must be nonnegative came out clearly negative."""


class EndOfRun(BanditError):
    """The environment has no rounds left."""
