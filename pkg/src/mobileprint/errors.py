"""Exception types shared across the package."""


class MobilePrintError(Exception):
    """Base class for all package errors."""


class ConfigError(MobilePrintError):
    """Scenario or configuration file is missing, unreadable or inconsistent."""


class InvalidSpecError(MobilePrintError):
    """Structure specification is degenerate or self-contradictory."""


class PlanningError(MobilePrintError):
    """Base-path prescription failed (infeasible standoff, bad geometry)."""


class SynchronizationError(MobilePrintError):
    """Nozzle/base synchronization violates the reach band.

    Carries the first violating sample index.
    """

    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"reach violation at sample {index}")


class DegenerateObservationError(MobilePrintError):
    """Marker observation is too far out of plane to project to SE(2)."""


class UnknownMarkerError(MobilePrintError):
    """Detection names a marker id absent from the map."""


class NoVisibleMarkerError(MobilePrintError):
    """Measurement stacking was asked to stack an empty set."""


class FilterDivergenceError(MobilePrintError):
    """Innovation covariance lost positive definiteness."""


class JointLimitError(MobilePrintError):
    """Joint configuration violates the chain's position limits."""


class IkFailureError(MobilePrintError):
    """Differential IK could not keep the tracking residual in tolerance.

    Carries the sample index where tracking was abandoned.
    """

    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"differential IK failed at sample {index}")


class DimensionError(MobilePrintError):
    """Operand dimensions do not match the declared problem sizes."""


class SolverFailureError(MobilePrintError):
    """QP solver hit its iteration limit before satisfying KKT conditions.

    Carries the best iterate and its residuals for diagnosis.
    """

    def __init__(self, message: str, best_u=None, residuals=None):
        self.best_u = best_u
        self.residuals = residuals or {}
        super().__init__(message)


class VisibilityFaultError(MobilePrintError):
    """No marker was seen for longer than the configured window.

    Carries the simulation step at which the fault was declared.
    """

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"no visible marker for too long at step {step}")


class InsufficientDataError(MobilePrintError):
    """A fitted segment has too few points to be meaningful."""


class VerticalDegeneracyError(MobilePrintError):
    """Line fit requested on points with no spread in the independent axis."""


class CsvParseError(MobilePrintError):
    """A CSV artifact failed to parse.  Carries the 1-based line number."""

    def __init__(self, line: int, message: str = ""):
        self.line = line
        super().__init__(message or f"malformed CSV at line {line}")
