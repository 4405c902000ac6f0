"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an input violates a documented precondition."""


class DivergenceError(RuntimeError):
    """Raised when a loss, gradient or objective becomes non-finite."""


class UndefinedCorrelation(ValueError):
    """Raised when a correlation is requested for constant inputs."""


class InsufficientData(RuntimeError):
    """Raised when a buffer cannot supply the requested batch."""
