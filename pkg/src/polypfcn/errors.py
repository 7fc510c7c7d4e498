"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes disagree along a named axis."""


class ConfigurationError(ValueError):
    """Hyperparameters that cannot produce a valid computation."""


class ValidationError(ValueError):
    """Input values outside their admissible set."""


class GeometryError(ValueError):
    """Degenerate camera or light geometry."""


class ConversionError(ValueError):
    """A network transformation cannot be applied to the given spec."""


class NonFiniteGradientError(FloatingPointError):
    """An optimizer step was asked to apply NaN or inf gradients."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the path of the last checkpoint written with finite
    parameters, or None if nothing was written.
    """

    def __init__(self, message, iteration=None, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint


class DataError(RuntimeError):
    """Dataset files are missing, undecodable or inconsistent."""
