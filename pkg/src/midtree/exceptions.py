class InvalidInputError(ValueError):
    """Raised for malformed or non-finite inputs."""


class DomainError(ValueError):
    """Raised when a state lies outside the manifold described by an environment."""


class UnsatisfiableEnvironmentError(RuntimeError):
    """Raised when rejection sampling cannot find a free state."""


class NonFiniteLossError(FloatingPointError):
    """Raised when training produces a NaN or infinite loss."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
