"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DeepAQError(Exception):
    exit_code = 1


class ConfigError(DeepAQError, ValueError):
    exit_code = 2


class CheckpointVersionError(ConfigError):
    pass


class DataError(DeepAQError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class NumericFault(DeepAQError, ArithmeticError):
    exit_code = 4
