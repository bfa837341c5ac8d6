"""Exception hierarchy shared by every cloudfl module."""


class CloudFLError(Exception):
    """Base class for all simulator errors."""

    exit_code = 1


class ContractViolation(CloudFLError, ValueError):
    """A pure operation was called with arguments outside its contract."""

    exit_code = 3


class ConfigurationError(CloudFLError, ValueError):
    """The configuration is malformed or cannot be satisfied."""

    exit_code = 2


class InvariantViolation(CloudFLError, RuntimeError):
    """A runtime invariant broke (non-finite vector, unnormalized reputation...)."""

    exit_code = 3


class ShapleyGuardError(ConfigurationError):
    """Exact Shapley requested for more players than is tractable."""


class UndefinedCorrelationError(ContractViolation):
    """Pearson correlation of a constant series."""
