"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """Raised when an argument violates a documented precondition."""


class InvalidConfig(ValueError):
    """Raised when a configuration object fails validation."""


class SceneFileError(ValueError):
    """Raised when a scene file cannot be parsed or fails validation.

    The message always carries the 1-based line number of the offending
    record so that broken files can be fixed by hand.
    """

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InfiniteDivergence(ArithmeticError):
    """KL divergence is infinite (reference has zero mass where q does not)."""


class NumericalFailure(RuntimeError):
    """Non-finite loss encountered during training."""

    def __init__(self, message: str, batch_index: int | None = None) -> None:
        self.batch_index = batch_index
        super().__init__(message)


class CheckpointError(ValueError):
    """Raised on malformed or version-incompatible checkpoint files."""
