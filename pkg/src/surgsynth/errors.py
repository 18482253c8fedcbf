"""Exception hierarchy shared by every stage of the synthesis pipeline."""

from __future__ import annotations


class SynthError(Exception):
    """Base class for all package errors."""


class ValidationError(SynthError, ValueError):
    """Input failed a structural or range check."""


class InsufficientSamplesError(ValidationError):
    """Too few samples for a statistic or training run."""


class EmptyClassError(ValidationError):
    """No training sample contains the requested class."""


class CompatibilityError(ValidationError):
    """Two architecture descriptors do not match."""


class RegistryLookupError(SynthError, LookupError):
    """A class id, prompt or checkpoint is not registered."""


class DependencyError(SynthError):
    """A pipeline stage was run before its prerequisites."""
