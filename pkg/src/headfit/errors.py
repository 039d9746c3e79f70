"""Exception hierarchy; the CLI maps these onto exit codes."""


class HeadfitError(Exception):
    pass


class ValidationError(HeadfitError, ValueError):
    """Bad shapes, bad indices, malformed files or configs (CLI exit 2)."""


class NumericalError(HeadfitError, ArithmeticError):
    """NaN/inf, divergence, geometry behind the camera (CLI exit 3)."""


class ProjectionError(NumericalError):
    def __init__(self, message, point_index=None, frame=None):
        super().__init__(message)
        self.point_index = point_index
        self.frame = frame


class DivergenceError(NumericalError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
