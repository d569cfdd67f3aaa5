"""Exception hierarchy. The CLI maps these onto process exit codes."""


class LorraError(Exception):
    exit_code = 1


class ConfigError(LorraError, ValueError):
    exit_code = 2


class DataError(LorraError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ContractError(LorraError, ValueError):
    """Shape or precondition violation at an API boundary."""

    exit_code = 2


class NumericError(LorraError, ArithmeticError):
    exit_code = 4


class PredictionError(LorraError, ValueError):
    exit_code = 4
