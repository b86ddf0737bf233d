"""Exception types shared across the toolkit."""

from __future__ import annotations


class GrowfragError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(GrowfragError):
    """Configuration file or override could not be parsed/validated.

    ``location`` points at the offending key (dotted path) when known.
    """

    def __init__(self, message, location=None):
        self.location = location
        if location:
            message = f"{location}: {message}"
        super().__init__(message)


class ModelValidationError(GrowfragError):
    """A model component violates its declared bounds."""


class FlowIntegrationError(GrowfragError):
    """Deterministic mass flow produced a non-finite value."""


class FlowDomainError(GrowfragError, ValueError):
    """Arguments outside the domain of a flow operation (e.g. x > y)."""


class ExplosionError(GrowfragError):
    """Population hit the individual cap before the horizon.

    Carries the partial event log so callers can report cap-hit statistics
    instead of silently truncating.
    """

    def __init__(self, message, partial_log=None, n_individuals=0):
        super().__init__(message)
        self.partial_log = partial_log if partial_log is not None else []
        self.n_individuals = n_individuals


class NoRootError(GrowfragError):
    """The Malthus root search could not bracket L(q) = 1.

    ``diagnostics`` holds the envelope estimates gathered while trying.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class IllConditionedDerivativeError(GrowfragError):
    """Finite-difference slope of the return transform is not significantly negative."""


class InvalidHarmonicError(GrowfragError):
    """Harmonic-weight values must be strictly positive to tilt the process."""


class MixingWarning(UserWarning):
    """Occupation histograms of two run halves disagree beyond tolerance."""
