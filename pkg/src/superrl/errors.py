"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class ConfigError(ValueError):
    """A configuration or precondition was violated."""


class NumericError(ArithmeticError):
    """A loss or ratio became non-finite.

    ``step`` is the 1-based index of the training update that failed, when known.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
