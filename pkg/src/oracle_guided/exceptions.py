"""Exception hierarchy shared by every module of the package."""


class OracleGuidedError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(OracleGuidedError, ValueError):
    pass


class LengthMismatch(OracleGuidedError, ValueError):
    pass


class NonConvergence(OracleGuidedError, ArithmeticError):
    pass


class SingularInnerMatrix(OracleGuidedError, ArithmeticError):
    pass


class InternalSolverFailure(OracleGuidedError, RuntimeError):
    """An oracle could not build its gains (DARE did not converge)."""


class InfeasibleLayout(OracleGuidedError, ValueError):
    """Obstacle density cannot be honoured under the flat-separation rule."""


class OutOfRange(OracleGuidedError, ValueError):
    pass


class SteppingTerminatedEpisode(OracleGuidedError, RuntimeError):
    pass


class DegenerateInput(OracleGuidedError, ValueError):
    pass


class EmptyInput(OracleGuidedError, ValueError):
    pass


class NaNDetected(OracleGuidedError, FloatingPointError):
    """Raised when a loss or gradient turns non-finite; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ChecksumMismatch(OracleGuidedError, IOError):
    pass


class ConfigError(OracleGuidedError, ValueError):
    """Invalid run configuration. ``field`` names the offending key path."""

    def __init__(self, message, field=None, line=None):
        loc = []
        if field is not None:
            loc.append(f"field '{field}'")
        if line is not None:
            loc.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.field = field
        self.line = line


class IoFailure(OracleGuidedError, IOError):
    pass
