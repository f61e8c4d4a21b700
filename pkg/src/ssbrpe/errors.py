"""Exception hierarchy shared across the pipeline.

Each family maps onto one CLI exit code: configuration problems exit 2,
data problems exit 3 and numeric failures exit 4.
"""


class SSBRPEError(Exception):
    exit_code = 1


class ConfigError(SSBRPEError, ValueError):
    exit_code = 2


class CompatibilityError(ConfigError):
    """Checkpoint and feature extractor disagree on their configuration."""


class DataError(SSBRPEError, ValueError):
    exit_code = 3


class SamplingError(DataError):
    pass


class EnergyError(DataError):
    pass


class InsufficientDecayError(DataError):
    pass


class DomainError(DataError):
    pass


class NumericError(SSBRPEError, ArithmeticError):
    exit_code = 4


class DimensionError(NumericError, ValueError):
    pass


class ContractError(NumericError):
    pass


class CapacityError(ConfigError):
    pass
