"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: bad invocations exit 1,
unreadable or inconsistent data exits 2, and everything else that goes
wrong at runtime exits 3.
"""


class SlideSegError(Exception):
    """Base class for all package errors."""


class ConfigError(SlideSegError):
    """Invalid configuration, incompatible shapes, or mismatched weights."""


class InvalidInputError(SlideSegError):
    """An argument violates a documented precondition."""


class InvalidPromptError(InvalidInputError):
    """A prompt is malformed or falls outside the image bounds."""


class CorruptDataError(SlideSegError):
    """Persisted data failed an integrity check while loading."""


class DegenerateVolumeError(CorruptDataError):
    """A volume has no usable intensity statistics (e.g. constant voxels)."""


class TrainingFault(SlideSegError):
    """Optimization produced a non-finite loss or otherwise diverged."""
