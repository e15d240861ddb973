"""Exception taxonomy shared across the package."""


class ModalignError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ModalignError):
    """Tensor shapes do not satisfy an operation's contract."""


class CapacityError(ModalignError):
    """Input exceeds a fixed capacity (e.g. the maximum sequence length)."""


class ContractError(ModalignError):
    """An API was used outside its stated contract (not a data problem)."""


class DataError(ModalignError):
    """Input data violates the expected schema or value constraints."""


class ParseError(DataError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class ConfigError(ModalignError):
    """A run configuration is invalid; names the offending field."""


class NumericAbort(ModalignError):
    """Training produced a non-finite loss and was aborted."""
