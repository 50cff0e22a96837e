"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor or layer shapes do not line up."""


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


class IngestionError(ValueError):
    """Raised when an input data file fails validation."""
