"""Exception types shared across the package."""


class CutFemError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(CutFemError):
    """Invalid run configuration or model declaration."""


class GeometryError(CutFemError):
    """Level-set evaluation or mesh/geometry consistency failure."""


class SourceError(CutFemError):
    """Source placement or monopole construction failure."""


class SolverError(CutFemError):
    """Linear solver failure.

    Attributes:
        residuals: relative residual history, one entry per iteration
            (empty when the failure happened before iterating).
    """

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = list(residuals) if residuals is not None else []
