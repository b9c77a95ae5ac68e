"""Exception types raised across the package."""


class NcdError(Exception):
    """Base class for all errors raised by ncdseg."""


class DisjointnessViolation(NcdError, ValueError):
    pass


class LabelOutOfSplit(NcdError, ValueError):
    pass


class LengthMismatch(NcdError, ValueError):
    pass


class ParseError(NcdError, ValueError):
    pass


class EmptyCloud(NcdError, ValueError):
    pass


class UnknownClassName(NcdError, KeyError):
    pass


class CountMismatch(NcdError, ValueError):
    pass


class ShapeMismatch(NcdError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class ViewMismatch(ShapeMismatch):
    pass


class NormalizationDegenerate(NcdError, ArithmeticError):
    pass


class TraceMismatch(NcdError, ValueError):
    pass


class StepOutOfRange(NcdError, ValueError):
    pass


class NumericOverflow(NcdError, ArithmeticError):
    pass


class DegenerateColumn(NcdError, ArithmeticError):
    pass


class ZeroFrequency(NcdError, ValueError):
    pass


class EmptyMask(NcdError, ValueError):
    pass


class IdOutOfRange(NcdError, IndexError):
    pass


class NoNovelPoints(NcdError, ValueError):
    pass


class TooFewPoints(NcdError, ValueError):
    pass


class ZeroEnsemble(NcdError, ArithmeticError):
    pass


class UnknownClass(NcdError, KeyError):
    pass


class CheckpointError(NcdError, ValueError):
    pass


class TaintError(NcdError, RuntimeError):
    """Raised when novel ground truth is read inside a guarded training scope."""
