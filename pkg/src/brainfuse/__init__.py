"""Three-layer fusion segmentation of multi-modal brain MRI.

Pixel-level preprocessing (:mod:`brainfuse.preprocess`), an attention U-Net
(:mod:`brainfuse.segnet`) and vision-language semantic fusion
(:mod:`brainfuse.semantic`), with metrics, training and a CLI around them.
"""

from .errors import ConfigError, DataError
from .model import AblationSwitches, FusionSegmenter
from .volume import Case, Volume

__version__ = "0.1.0"
__all__ = ["AblationSwitches", "Case", "ConfigError", "DataError", "FusionSegmenter", "Volume"]
