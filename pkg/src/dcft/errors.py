"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DcftError(Exception):
    exit_code = 1


class ConfigError(DcftError):
    exit_code = 2


class ShapeError(DcftError, ValueError):
    exit_code = 3


class DataError(DcftError):
    exit_code = 4


class NumericError(DcftError, FloatingPointError):
    exit_code = 5


class UsageError(DcftError, RuntimeError):
    """Engine misuse: non-scalar backward, training a frozen matrix, etc."""

    exit_code = 2


class CheckpointError(DataError):
    pass
