"""Exception hierarchy.

Errors are split by the CLI exit code they map to: problems with the input data
(:class:`DataError`, exit 2) and numerical failures (:class:`NumericalError`, exit 3).
"""


class LassoRNetError(Exception):
    pass


class DataError(LassoRNetError, ValueError):
    pass


class NumericalError(LassoRNetError, ArithmeticError):
    pass


class ZeroVector(DataError):
    """A (0, 0) pair has no defined phase."""


class EmptyInput(DataError):
    pass


class OutOfRange(DataError):
    pass


class LengthMismatch(DataError):
    pass


class ParseError(DataError):
    pass


class InconsistentGenes(DataError):
    pass


class DuplicateSample(DataError):
    pass


class AllGenesRemoved(DataError):
    pass


class TooFewPeople(DataError):
    pass


class BadSpec(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyValidation(DataError):
    pass


class MissingSamples(DataError):
    pass


class Diverged(NumericalError):
    """Training loss became non-finite or kept increasing after every step halving."""


class NonConvergence(NumericalError):
    def __init__(self, message, kkt_residual=None):
        super().__init__(message)
        self.kkt_residual = kkt_residual


class RankDeficient(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass
