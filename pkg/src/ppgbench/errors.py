"""Exception types shared across the package."""


class PpgBenchError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PpgBenchError):
    """Invalid configuration or data handed to an operation."""


class BundleFormatError(PpgBenchError):
    """On-disk bundle (or ingest input) is malformed."""


class SplitError(PpgBenchError):
    """Split construction failed."""


class InfeasibleQuotaError(SplitError):
    """Tail-emphasis quota cannot be met by any test-subject selection.

    Carries the best achievable tail fractions so callers can adjust the
    quota.
    """

    def __init__(self, message, achievable_low, achievable_high):
        super().__init__(message)
        self.achievable_low = achievable_low
        self.achievable_high = achievable_high


class BinningMismatchError(PpgBenchError):
    """Two histograms or weight tables do not share a binning."""


class ShapeError(PpgBenchError):
    """Array input has the wrong shape or an inadmissible length."""


class TrainingError(PpgBenchError):
    """Training aborted (e.g. non-finite loss); message carries context."""
