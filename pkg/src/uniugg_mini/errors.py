"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class ConfigurationError(RuntimeError):
    """A run or pipeline is missing a required component or checkpoint."""


class GenerationError(RuntimeError):
    """Procedural scene generation could not satisfy its constraints."""
