"""attnbridge: runs frozen pretrained models (or deterministic stand-ins)
and exports attention stacks, embeddings, and VLM transcripts in the
engine's file formats."""

from .export import (
    INVERSION_STEPS,
    RECONSTRUCTION_STEPS,
    ExportSummary,
    InversionJob,
    caption_images,
    export_attention_stack,
    export_embeddings,
    run_vlm,
)
from .nada1_writer import BridgeExportError

__version__ = "0.1.0"

__all__ = [
    "BridgeExportError",
    "ExportSummary",
    "INVERSION_STEPS",
    "InversionJob",
    "RECONSTRUCTION_STEPS",
    "caption_images",
    "export_attention_stack",
    "export_embeddings",
    "run_vlm",
    "__version__",
]
