"""Exception and warning types shared across the toolkit."""


class MemhomogError(Exception):
    """Base class for all toolkit errors."""


class AdmissibilityError(MemhomogError):
    """Cell geometry violates one of the admissibility conditions."""

    def __init__(self, report):
        self.report = list(report)
        super().__init__("; ".join(self.report) if self.report else "inadmissible geometry")


class FormatError(MemhomogError):
    """Malformed mask file or descriptor."""


class LayoutError(MemhomogError):
    """Field layout does not match the grid it is used with."""


class ShapeError(MemhomogError):
    """Input arrays have an unexpected shape."""


class NoConvergence(MemhomogError):
    def __init__(self, iterations, residual, message=None):
        self.iterations = int(iterations)
        self.residual = float(residual)
        super().__init__(message or f"no convergence after {iterations} iterations (residual {residual:.3e})")


class IncompatibleRHS(MemhomogError):
    """Right-hand side has a component along the declared kernel."""


class SingularBlock(MemhomogError):
    """Velocity block of a saddle-point system is rank deficient."""


class SingularSystem(MemhomogError):
    """SPD system is singular beyond its declared kernel."""


class IncompleteSet(MemhomogError):
    """A coefficient was requested from an incomplete set of cell solutions."""


class UnknownDefinition(MemhomogError):
    pass


class DimensionMismatch(MemhomogError):
    pass


class MissingCoefficient(MemhomogError):
    pass


class BlowUp(MemhomogError):
    """Discrete energy grew far beyond its initial value under zero forcing."""


class ConfigError(MemhomogError):
    """Configuration file could not be parsed or is inconsistent."""


class NonMonotoneWarning(UserWarning):
    """Successive differences in a refinement study do not shrink."""


class GeometryWarning(UserWarning):
    """Mask features that cannot be checked discretely (e.g. diagonal-only contacts)."""
