"""Exception hierarchy shared by all plates modules."""


class PlatesError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameterError(PlatesError, ValueError):
    """A physical or numerical parameter is outside its admissible range."""


class NumericalDegeneracyError(PlatesError, ArithmeticError):
    """A matrix that must be invertible turned out singular."""


class MeshFormatError(PlatesError, ValueError):
    """A mesh or state file could not be parsed or failed validation."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SolverError(PlatesError, RuntimeError):
    """An iterative linear solve did not reach its tolerance."""


class LineSearchError(PlatesError, RuntimeError):
    """Backtracking found no step satisfying the Armijo condition.

    The partial :class:`~plates.solver.SolveReport` and the last iterate are
    attached so callers can still inspect them.
    """

    def __init__(self, message, report=None, state=None):
        super().__init__(message)
        self.report = report
        self.state = state


class ConfigError(PlatesError, ValueError):
    """A run configuration failed schema validation."""
