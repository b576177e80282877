"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class DicosaError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this category."""

    exit_code = 1


class ShapeError(DicosaError, ValueError):
    exit_code = 3


class ParameterError(DicosaError, ValueError):
    exit_code = 3


class BatchSizeError(DicosaError, ValueError):
    exit_code = 3


class DomainError(DicosaError, ValueError):
    exit_code = 3


class NumericalError(DicosaError, ArithmeticError):
    exit_code = 4


class ConfigError(DicosaError, ValueError):
    exit_code = 2


class DataError(DicosaError, ValueError):
    exit_code = 5


class CorruptStoreError(DataError):
    exit_code = 5


class VersionError(DataError):
    exit_code = 5


class CheckpointError(DataError):
    exit_code = 6
