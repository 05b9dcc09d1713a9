"""Exception types shared across the pipeline stages."""


class TilscopeError(Exception):
    """Base class for all library errors."""


class ValidationError(TilscopeError, ValueError):
    """Bad input or configuration detected before any work is done."""


class ShapeError(ValidationError):
    """Two rasters that must share dimensions do not."""


class EmptyRasterError(ValidationError):
    pass


class InvalidAnnotationError(ValidationError):
    def __init__(self, value, x, y):
        super().__init__(f"annotation value {value} at pixel (x={x}, y={y}) is outside 0..7")
        self.value = value
        self.x = x
        self.y = y


class RasterDecodeError(TilscopeError):
    def __init__(self, path, offset, reason):
        super().__init__(f"{path}: cannot decode PNG at byte offset {offset}: {reason}")
        self.path = path
        self.offset = offset


class IncompleteStitchError(TilscopeError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(str(o) for o in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"no patch result for window origins: {shown}{more}")


class OutOfBoundsError(TilscopeError):
    pass


class ConfigurationError(ValidationError):
    pass


class UndefinedMetricError(TilscopeError, ValueError):
    pass


class DivergingBetaError(TilscopeError, ArithmeticError):
    """Raised when the partial likelihood keeps increasing as |beta| grows."""

    def __init__(self, beta, iterations):
        super().__init__(
            f"Cox coefficient diverged (beta={beta:.3f} after {iterations} iterations); "
            "the covariate probably separates the event times perfectly"
        )
        self.beta = beta
        self.iterations = iterations


class ConvergenceError(TilscopeError, ArithmeticError):
    pass
