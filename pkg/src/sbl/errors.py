"""Exception hierarchy. Each class maps to a CLI exit code."""


class SblError(Exception):
    exit_code = 1


class UsageError(SblError):
    exit_code = 1


class ConfigError(SblError, ValueError):
    exit_code = 2


class DataError(SblError, ValueError):
    exit_code = 3


class ShapeError(SblError, ValueError):
    exit_code = 4


class ContractError(SblError, ValueError):
    exit_code = 4


class NumericError(SblError, ArithmeticError):
    exit_code = 4
