"""Exception and warning classes."""


class HurdleGEEError(ValueError):
    """Base class for all errors raised by this package."""


# ingestion / data model
class IngestError(HurdleGEEError):
    pass


class MissingColumn(IngestError):
    pass


class BadCategory(IngestError):
    pass


class BadValue(IngestError):
    pass


class DuplicateCell(IngestError):
    pass


class EmptyTime(HurdleGEEError):
    pass


# mean model
class DimensionMismatch(HurdleGEEError):
    pass


class NonmonotoneCutpoints(HurdleGEEError):
    pass


# correlation
class EmptyResiduals(HurdleGEEError):
    pass


class NoPairs(HurdleGEEError):
    pass


class InsufficientPairs(HurdleGEEError):
    pass


class TooFewClusters(HurdleGEEError):
    pass


class DegenerateCategory(HurdleGEEError):
    pass


# solver
class SingularSystem(HurdleGEEError):
    pass


class RankDeficientDesign(HurdleGEEError):
    pass


class MissingLevel(HurdleGEEError):
    pass


class ZeroDenominator(HurdleGEEError):
    pass


class Separation(HurdleGEEError):
    pass


# inference
class JackknifeUnstable(HurdleGEEError):
    pass


class TooManyFailures(HurdleGEEError):
    pass


# simulation / cli
class InfeasibleCorrelation(HurdleGEEError):
    pass


class MissingArtifact(HurdleGEEError):
    pass


class ConvergenceWarning(UserWarning):
    """Soft non-convergence: the best iterate is still returned."""


class EstimationWarning(UserWarning):
    """A moment estimator fell back to a simpler scheme."""
