"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MapsegError(Exception):
    exit_code = 1


class ConfigError(MapsegError, ValueError):
    exit_code = 2


class DataError(MapsegError, ValueError):
    exit_code = 3


class DimensionMismatch(DataError):
    pass


class TrainingDivergence(MapsegError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, round_index=None):
        super().__init__(message)
        self.round_index = round_index
