"""Exception types raised across the package."""


class LcomError(Exception):
    """Base class for all package errors."""


class DegenerateCell(LcomError, ValueError):
    pass


class NonFinite(LcomError, ValueError):
    pass


class OverlapSingularity(LcomError, ArithmeticError):
    pass


class RelaxationDiverged(LcomError, RuntimeError):
    pass


class InitFailed(LcomError, RuntimeError):
    pass


class DimensionMismatch(LcomError, ValueError):
    pass


class NonFiniteGradient(LcomError, FloatingPointError):
    pass


class CompositionMismatch(LcomError, ValueError):
    pass


class EmptyDataset(LcomError, ValueError):
    pass


class NonFiniteIterate(LcomError, FloatingPointError):
    pass


class ZeroReference(LcomError, ZeroDivisionError):
    pass
