"""Exception hierarchy.

Every error raised by the library derives from :class:`GrangerLabError`.
Two families matter to callers (and to the CLI exit codes):

* :class:`ValidationError` -- the input or configuration is unusable (exit 2).
* :class:`NumericalError` -- the computation broke down on valid input (exit 3).
"""


class GrangerLabError(Exception):
    """Base class; ``details`` carries machine-readable context."""

    def __init__(self, message="", **details):
        super().__init__(message)
        self.details = details


class ValidationError(GrangerLabError, ValueError):
    pass


class NumericalError(GrangerLabError, ArithmeticError):
    pass


# --- input / configuration ---------------------------------------------------

class EmptyInput(ValidationError):
    pass


class RaggedTrials(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class SegmentTooShort(ValidationError):
    pass


class InsufficientSamples(ValidationError):
    pass


class MaxLagTooSmall(ValidationError):
    pass


class ChannelOverlap(ValidationError):
    pass


class WindowTooShort(ValidationError):
    pass


class SchemeInfeasible(ValidationError):
    pass


class TooFewTrialsForShuffle(SchemeInfeasible):
    pass


class VariantTrialMismatch(ValidationError):
    pass


class BandwidthNonPositive(ValidationError):
    pass


class OutOfRangeP(ValidationError):
    pass


class UnstableSpec(ValidationError):
    pass


class MissingStateCov(ValidationError):
    pass


# --- numerical breakdown -----------------------------------------------------

class SingularDesign(NumericalError):
    pass


class SingularExpandedDesign(SingularDesign):
    pass


class SingularCovarianceBlock(NumericalError):
    pass


class SingularTheta(NumericalError):
    pass


class CorrelatedInnovations(NumericalError):
    pass


class ZeroRow(NumericalError):
    pass


class ZeroColumn(NumericalError):
    pass


class ZeroDensity(NumericalError):
    pass


class CovarianceBlowup(NumericalError):
    pass


class Divergence(NumericalError):
    pass


class LikelihoodDecrease(NumericalError):
    pass
