"""Exception types raised across the package."""


class TrajTensorError(Exception):
    """Base class for all package errors."""


class LyapunovSolveFailure(TrajTensorError):
    pass


class NonMonotoneTimestamp(TrajTensorError, ValueError):
    pass


class SingularPredictCovariance(TrajTensorError, ArithmeticError):
    pass


class NotSmoothed(TrajTensorError):
    pass


class DimensionMismatch(TrajTensorError, ValueError):
    pass


class ImproperCalibration(TrajTensorError, ArithmeticError):
    """Cavity distribution is not a proper density; the site is skipped."""


class SingularSystem(TrajTensorError, ArithmeticError):
    pass


class NonPositiveRate(TrajTensorError, ArithmeticError):
    pass


class UnknownObject(TrajTensorError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown object"


class IndexOutOfRange(TrajTensorError, ValueError):
    pass


class EmptyModel(TrajTensorError):
    pass


class CorruptCheckpoint(TrajTensorError, ValueError):
    pass


class ParseError(TrajTensorError, ValueError):
    def __init__(self, line, column, reason):
        self.line = line
        self.column = column
        self.reason = reason
        super().__init__(f"line {line}, column {column}: {reason}")


class EmptyTestSet(TrajTensorError, ValueError):
    pass


class IncompatibleRank(TrajTensorError, ValueError):
    pass
