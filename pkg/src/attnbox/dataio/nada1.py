"""NADA1 binary container: attention stacks, embedding matrices, checkpoints.

Layout (all integers little-endian):

    magic    4 bytes  b"NADA"
    version  u16      currently 1
    kind     u16      1 = attention stack, 2 = embedding matrix,
                      3 = MLP checkpoint (written by the proposer module)

kind 1 body:
    image id (u16 length + UTF-8), u32 J, u32 K, u32 T,
    K pairs of (u32 H_k, u32 W_k),
    span table: u32 label count, each entry = label (u16 length + UTF-8)
    + u32 span length + that many u32 token indices,
    payload: for j in 0..J, k in 0..K, t in 0..T: H_k*W_k float32 row-major.

kind 2 body:
    u32 N, u32 D, N id strings (u16 length + UTF-8), N*D float32 row-major.

Writers validate before emitting a single byte and are deterministic for
equal inputs (span tables are serialized in sorted label order).
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ..errors import FormatError, TruncationError
from .types import AttentionStack, EmbeddingMatrix

MAGIC = b"NADA"
VERSION = 1
KIND_ATTENTION_STACK = 1
KIND_EMBEDDING_MATRIX = 2
KIND_MLP_CHECKPOINT = 3

STACK_SUFFIX = ".nada"


def encode_str16(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"string too long for u16 length prefix: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def encode_header(kind: int) -> bytes:
    return MAGIC + struct.pack("<HH", VERSION, kind)


class RecordReader:
    """Cursor over a binary stream with typed reads and truncation checks."""

    def __init__(self, stream: BinaryIO):
        self._stream = stream

    def read_exact(self, n: int, what: str) -> bytes:
        buf = self._stream.read(n)
        if buf is None:
            buf = b""
        if len(buf) != n:
            raise TruncationError(what, n, len(buf))
        return buf

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.read_exact(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read_exact(4, what))[0]

    def str16(self, what: str) -> str:
        length = self.u16(f"{what} length")
        raw = self.read_exact(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what}: invalid UTF-8") from exc

    def check_header(self, expected_kind: int, what: str) -> None:
        magic = self.read_exact(4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version = self.u16("version")
        if version != VERSION:
            raise FormatError(f"unknown container version {version}")
        kind = self.u16("record kind")
        if kind != expected_kind:
            raise FormatError(
                f"record kind {kind} is not {what} (expected kind {expected_kind})"
            )


def _open_sink(sink) -> tuple[BinaryIO, bool]:
    if isinstance(sink, (str, Path)):
        return open(sink, "wb"), True
    return sink, False


def _open_source(source) -> tuple[BinaryIO, bool]:
    if isinstance(source, (str, Path)):
        return open(source, "rb"), True
    if isinstance(source, (bytes, bytearray)):
        return io.BytesIO(source), True
    return source, False


def write_attention_stack(stack: AttentionStack, sink) -> int:
    """Serialize a stack; returns the byte count. Validates before writing."""
    stack.validate()
    parts = [encode_header(KIND_ATTENTION_STACK), encode_str16(stack.image_id)]
    parts.append(struct.pack("<III", stack.J, stack.K, stack.T))
    for h, w in stack.grids:
        parts.append(struct.pack("<II", h, w))
    spans = sorted(stack.label_spans.items())
    parts.append(struct.pack("<I", len(spans)))
    for label, span in spans:
        parts.append(encode_str16(label))
        parts.append(struct.pack("<I", len(span)))
        parts.append(struct.pack(f"<{len(span)}I", *span))
    for row in stack.data:
        for blk in row:
            parts.append(np.ascontiguousarray(blk, dtype="<f4").tobytes())
    payload = b"".join(parts)
    stream, close = _open_sink(sink)
    try:
        stream.write(payload)
    finally:
        if close:
            stream.close()
    return len(payload)


def read_attention_stack(source) -> AttentionStack:
    """Parse a kind-1 record; inverse of :func:`write_attention_stack`."""
    stream, close = _open_source(source)
    try:
        r = RecordReader(stream)
        r.check_header(KIND_ATTENTION_STACK, "an attention stack")
        image_id = r.str16("image id")
        j_count = r.u32("J")
        k_count = r.u32("K")
        t_count = r.u32("T")
        if j_count < 1 or k_count < 1 or t_count < 1:
            raise FormatError(
                f"stack {image_id!r}: J/K/T must all be >= 1, got {j_count}/{k_count}/{t_count}"
            )
        grids = [(r.u32("grid height"), r.u32("grid width")) for _ in range(k_count)]
        n_labels = r.u32("span count")
        spans: dict[str, tuple[int, ...]] = {}
        for _ in range(n_labels):
            label = r.str16("span label")
            if label in spans:
                raise FormatError(f"stack {image_id!r}: duplicate span label {label!r}")
            span_len = r.u32("span length")
            raw = r.read_exact(4 * span_len, f"span indices of {label!r}")
            spans[label] = struct.unpack(f"<{span_len}I", raw)
        data = []
        for j in range(j_count):
            row = []
            for k, (h, w) in enumerate(grids):
                nbytes = t_count * h * w * 4
                raw = r.read_exact(nbytes, f"payload block ({j},{k})")
                blk = np.frombuffer(raw, dtype="<f4").reshape(t_count, h, w).copy()
                row.append(blk)
            data.append(tuple(row))
        return AttentionStack(image_id=image_id, label_spans=spans, data=tuple(data))
    finally:
        if close:
            stream.close()


def write_embedding_matrix(matrix: EmbeddingMatrix, sink) -> int:
    """Serialize a kind-2 record; returns the byte count."""
    matrix.validate()
    parts = [encode_header(KIND_EMBEDDING_MATRIX)]
    parts.append(struct.pack("<II", matrix.n, matrix.dim))
    for item_id in matrix.ids:
        parts.append(encode_str16(item_id))
    parts.append(np.ascontiguousarray(matrix.values, dtype="<f4").tobytes())
    payload = b"".join(parts)
    stream, close = _open_sink(sink)
    try:
        stream.write(payload)
    finally:
        if close:
            stream.close()
    return len(payload)


def read_embedding_matrix(source) -> EmbeddingMatrix:
    """Parse a kind-2 record; inverse of :func:`write_embedding_matrix`."""
    stream, close = _open_source(source)
    try:
        r = RecordReader(stream)
        r.check_header(KIND_EMBEDDING_MATRIX, "an embedding matrix")
        n = r.u32("N")
        d = r.u32("D")
        if n < 1 or d < 1:
            raise FormatError(f"embedding matrix: N/D must be >= 1, got {n}/{d}")
        ids = [r.str16(f"id {i}") for i in range(n)]
        raw = r.read_exact(n * d * 4, "embedding payload")
        values = np.frombuffer(raw, dtype="<f4").reshape(n, d).copy()
        return EmbeddingMatrix(ids=tuple(ids), values=values)
    finally:
        if close:
            stream.close()
