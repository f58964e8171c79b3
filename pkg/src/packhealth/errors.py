"""Exception hierarchy. Each CLI-facing error carries its process exit code."""


class PackHealthError(Exception):
    exit_code = 1


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


class ConfigError(PackHealthError):
    exit_code = 2


class DataError(PackHealthError):
    exit_code = 3


class AlignmentError(DataError):
    pass


class NumericalError(PackHealthError):
    exit_code = 4


class OptimizationError(NumericalError):
    pass


class SpecError(ConfigError):
    """Synthetic generator spec produces implausible telemetry."""
