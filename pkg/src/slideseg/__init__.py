"""Promptable 3-slice segmentation of volumetric images.

The package trains a small promptable segmenter on stacks of three adjacent
slices and propagates its predictions through a volume with a sliding window,
so a single click or box on one slice yields a full 3-D mask.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    CorruptDataError,
    DegenerateVolumeError,
    InvalidInputError,
    InvalidPromptError,
    SlideSegError,
    TrainingFault,
)
from .prompts import Prompt
from .volume_io import RleMask, SliceWindow, Volume, VolumeMask

__all__ = [
    "ConfigError",
    "CorruptDataError",
    "DegenerateVolumeError",
    "InvalidInputError",
    "InvalidPromptError",
    "Prompt",
    "RleMask",
    "SliceWindow",
    "SlideSegError",
    "TrainingFault",
    "Volume",
    "VolumeMask",
    "__version__",
]
