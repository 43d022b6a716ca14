"""Exception types shared across the package."""


class KdaifError(Exception):
    """Base class for all library errors."""


class InputError(KdaifError, ValueError):
    """Malformed or inconsistent input (shapes, ranges, overlapping splits)."""


class NumericError(KdaifError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class CapacityError(KdaifError):
    """A dense operation was requested above the configured size cap."""


class SolverError(KdaifError):
    """An iterative solver failed to converge."""

    def __init__(self, message, residual_norm=None, iteration=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iteration = iteration


class DivergenceError(KdaifError):
    """Training loss exceeded the divergence threshold."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
