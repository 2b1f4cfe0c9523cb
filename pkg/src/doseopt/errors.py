"""Exception types shared across the package.

Everything raised on purpose derives from :class:`DoseoptError` so callers
(and the CLI) can distinguish our failures from genuine bugs.
"""


class DoseoptError(Exception):
    """Base class for all errors raised by doseopt."""


class DimensionError(DoseoptError):
    """Tensor shapes are incompatible for the requested operation."""


class DomainError(DoseoptError):
    """An input lies outside the mathematical domain of an operation."""


class ConfigurationError(DoseoptError):
    """A config object or file is malformed or inconsistent."""


class DataError(DoseoptError):
    """Input data violates a documented requirement (width, range, ...)."""


class StateError(DoseoptError):
    """An object was used before it reached the required state."""


class ContractError(DoseoptError):
    """An API contract was violated (e.g. backward from a non-scalar)."""


class NumericalError(DoseoptError):
    """A numerical procedure failed beyond recovery (all runs diverged)."""


class ArtifactMissingError(DoseoptError):
    """A required upstream artifact (dataset, checkpoint) is absent."""
