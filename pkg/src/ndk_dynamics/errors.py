"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI uses when it escapes.
"""


class NDKError(Exception):
    exit_code = 1


class ConfigError(NDKError, ValueError):
    """Invalid hyperparameters, arguments or configuration files."""

    exit_code = 2


class DataFormatError(NDKError):
    """A dataset file does not match its declared binary layout."""

    exit_code = 3

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DegenerateInputError(NDKError, ValueError):
    """Inputs that make the requested quantity meaningless (zero vectors, one class)."""

    exit_code = 3


class NumericalError(NDKError, ArithmeticError):
    exit_code = 4


class NumericalDomainError(NumericalError):
    """An arccos/arcsin argument or a covariance fell outside its valid range."""


class SingularKernelError(NumericalError):
    """A kernel matrix that must be inverted is numerically singular."""


class DivergenceError(NumericalError):
    """A trajectory (integral-equation solve or Langevin replica) blew up."""

    def __init__(self, message, index=None, seed=None):
        self.index = index
        self.seed = seed
        super().__init__(message)
