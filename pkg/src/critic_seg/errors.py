"""Exception hierarchy shared across the package.

Each error class maps to a distinct CLI exit code (see cli.py).
"""


class CriticSegError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(CriticSegError, ValueError):
    """Tensor arguments have incompatible shapes."""


class NonBinaryMaskError(CriticSegError, ValueError):
    """A ground-truth mask contains values other than {0, 1}."""


class GenerationError(CriticSegError):
    """Scene generation was asked for something impossible (e.g. object larger than canvas)."""


class DegenerateSplitError(CriticSegError):
    """Critic split produced an empty high or low set; phase 2 cannot run."""


class NumericFaultError(CriticSegError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(CriticSegError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class MissingArtifactError(CriticSegError):
    """A pipeline stage needs an artifact that a previous stage has not produced."""


class ArtifactMismatchError(CriticSegError):
    """An artifact exists but its recorded hash does not match the current config chain."""
