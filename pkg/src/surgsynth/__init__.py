"""Mask-guided synthesis of labelled multi-organ surgical scenes at toy scale.

Per-organ inpainting diffusion models, an edge-conditioned control branch,
z-ordered scene composition, partial-noising refinement, image-set and
segmentation metrics, and a downstream segmentation harness.
"""

from .errors import (
    CompatibilityError,
    DependencyError,
    EmptyClassError,
    InsufficientSamplesError,
    RegistryLookupError,
    SynthError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError",
    "DependencyError",
    "EmptyClassError",
    "InsufficientSamplesError",
    "RegistryLookupError",
    "SynthError",
    "ValidationError",
]
