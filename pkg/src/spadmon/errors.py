"""Exception types shared across the package."""


class SpadMonError(Exception):
    """Base class for all package errors."""


class DomainError(SpadMonError, ValueError):
    """An argument lies outside the domain of the operation."""


class ModelValidityError(SpadMonError, ValueError):
    """Parameters fall outside the regime where the first-order model holds."""


class NoEventSourceError(SpadMonError, RuntimeError):
    """The simulator exhausted its gate budget without producing the requested detections."""


class InsufficientDataError(SpadMonError, ValueError):
    """Not enough events, bins or counts for the requested analysis."""


class OrderingError(SpadMonError, ValueError):
    """Events were fed out of order."""


class EmptyHistogramError(SpadMonError, ValueError):
    """Operation needs at least one accumulated interval."""


class IncompatibleHistogramError(SpadMonError, ValueError):
    """Histograms differ in unit or bin count."""


class ConvergenceError(SpadMonError, RuntimeError):
    """The fitter hit its iteration limit; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class UnitMismatchError(SpadMonError, ValueError):
    """Baseline and estimate use different interval units or gate periods."""


class DegenerateScheduleError(SpadMonError, ValueError):
    """A hop schedule needs at least two distinct options."""


class ConfigError(SpadMonError, ValueError):
    """Invalid or malformed configuration document."""
