"""File formats, domain types, manifests, record streams, and fixtures."""

from .fixtures import DEFAULT_FIXTURE_CLASSES, FixtureSpec, generate_fixtures, make_fixture_image
from .manifest import (
    ARTDL_CLASSES,
    BUILTIN_VOCABULARIES,
    ICONART_CLASSES,
    load_manifest,
    manifest_from_dict,
    manifest_to_dict,
    save_manifest,
)
from .nada1 import (
    KIND_ATTENTION_STACK,
    KIND_EMBEDDING_MATRIX,
    KIND_MLP_CHECKPOINT,
    MAGIC,
    STACK_SUFFIX,
    VERSION,
    read_attention_stack,
    read_embedding_matrix,
    write_attention_stack,
    write_embedding_matrix,
)
from .streams import (
    TRANSCRIPT_KINDS,
    TranscriptRecord,
    read_detection_stream,
    read_proposal_stream,
    read_transcript_stream,
    write_detection_stream,
    write_proposal_stream,
    write_transcript_stream,
)
from .types import AttentionStack, Box, DatasetManifest, EmbeddingMatrix, ImageRecord

__all__ = [
    "ARTDL_CLASSES",
    "BUILTIN_VOCABULARIES",
    "DEFAULT_FIXTURE_CLASSES",
    "ICONART_CLASSES",
    "KIND_ATTENTION_STACK",
    "KIND_EMBEDDING_MATRIX",
    "KIND_MLP_CHECKPOINT",
    "MAGIC",
    "STACK_SUFFIX",
    "VERSION",
    "AttentionStack",
    "Box",
    "DatasetManifest",
    "EmbeddingMatrix",
    "FixtureSpec",
    "ImageRecord",
    "TranscriptRecord",
    "TRANSCRIPT_KINDS",
    "generate_fixtures",
    "load_manifest",
    "make_fixture_image",
    "manifest_from_dict",
    "manifest_to_dict",
    "read_attention_stack",
    "read_detection_stream",
    "read_embedding_matrix",
    "read_proposal_stream",
    "read_transcript_stream",
    "save_manifest",
    "write_attention_stack",
    "write_detection_stream",
    "write_embedding_matrix",
    "write_proposal_stream",
    "write_transcript_stream",
]
