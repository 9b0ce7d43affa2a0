"""Exception types shared across the package."""


class FuseSimError(Exception):
    """Base class for all errors raised by fusesim."""


class DimensionError(FuseSimError, ValueError):
    """Array shapes do not agree."""


class DomainError(FuseSimError, ValueError):
    """An argument lies outside the domain of the operation."""


class InconsistentStateError(FuseSimError, ValueError):
    """Inputs are individually valid but contradict each other."""


class ConfigError(FuseSimError, ValueError):
    """An experiment or hardware configuration is invalid or infeasible."""
