"""Exception hierarchy shared by the library and the command line."""


class GaitSetError(Exception):
    exit_code = 1


class ConfigError(GaitSetError, ValueError):
    """Invalid configuration, flag combination or shape contract."""

    exit_code = 2


class DataError(GaitSetError):
    """Missing, malformed or insufficient input data."""

    exit_code = 3


class NumericError(GaitSetError, ArithmeticError):
    """A NaN or Inf appeared in a forward or backward pass."""

    exit_code = 4
