"""Exception types shared across the package."""


class FedCKAError(Exception):
    """Base class for all package errors."""


class DimensionError(FedCKAError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(FedCKAError, ValueError):
    """A precondition on arguments or state was violated."""


class DegenerateInputError(FedCKAError, ValueError):
    """Input makes a metric undefined (zero variance, zero norm, ...)."""


class IngestionError(FedCKAError, OSError):
    """A dataset file is missing or malformed."""


class ConfigError(FedCKAError, ValueError):
    """Experiment configuration is invalid."""
