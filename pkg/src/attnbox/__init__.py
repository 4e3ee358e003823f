"""attnbox: detection from exported diffusion cross-attention stacks.

The pipeline is pure numerics over files: a class proposer suggests which
labels are in an image, per-label attention maps are aggregated from an
exported stack, thresholded and watershed-split into regions, and tight
boxes are scored and evaluated with a VOC-style protocol.
"""

from . import attnagg, cli, dataio, evalkit, promptgen, proposer, segbox
from .errors import (
    AttnboxError,
    FormatError,
    TranscriptParseError,
    TruncationError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "attnagg",
    "cli",
    "dataio",
    "evalkit",
    "promptgen",
    "proposer",
    "segbox",
    "AttnboxError",
    "FormatError",
    "TranscriptParseError",
    "TruncationError",
    "ValidationError",
    "__version__",
]
