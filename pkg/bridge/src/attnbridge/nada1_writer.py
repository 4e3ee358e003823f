"""Independent NADA1 emitters for the bridge.

The engine and the bridge interoperate only through this byte layout, so
the bridge carries its own writer instead of importing the engine.  The
stack writer is streaming: blocks are consumed one (timestep, block) at a
time so a full-size export never holds more than one block in memory.

Layout (little-endian): magic b"NADA", u16 version = 1, u16 kind
(1 = attention stack, 2 = embedding matrix); see the engine's format
reference for the body of each kind.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping, Sequence

import numpy as np

MAGIC = b"NADA"
VERSION = 1
KIND_ATTENTION_STACK = 1
KIND_EMBEDDING_MATRIX = 2

STACK_SUFFIX = ".nada"


class BridgeExportError(Exception):
    """Raised when an export cannot produce a valid artifact."""


def _str16(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise BridgeExportError(f"string too long for format: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def _open(sink) -> tuple[BinaryIO, bool]:
    if isinstance(sink, (str, Path)):
        return open(sink, "wb"), True
    return sink, False


def write_stack_streaming(
    sink,
    image_id: str,
    timesteps: int,
    grids: Sequence[tuple[int, int]],
    token_count: int,
    label_spans: Mapping[str, Sequence[int]],
    blocks: Iterable[np.ndarray],
) -> int:
    """Emit a kind-1 record; `blocks` yields (T, H_k, W_k) float arrays in
    (timestep-major, block-minor) order.  Returns the byte count."""
    if timesteps < 1 or len(grids) < 1 or token_count < 1:
        raise BridgeExportError("stack needs timesteps, blocks, and tokens all >= 1")
    if not label_spans:
        raise BridgeExportError("stack needs at least one label span")
    for label, span in label_spans.items():
        if not span or any(t < 0 or t >= token_count for t in span):
            raise BridgeExportError(f"invalid span for {label!r}: {tuple(span)}")

    stream, close = _open(sink)
    written = 0
    try:
        header = [MAGIC, struct.pack("<HH", VERSION, KIND_ATTENTION_STACK)]
        header.append(_str16(image_id))
        header.append(struct.pack("<III", timesteps, len(grids), token_count))
        for h, w in grids:
            header.append(struct.pack("<II", h, w))
        spans = sorted(label_spans.items())
        header.append(struct.pack("<I", len(spans)))
        for label, span in spans:
            header.append(_str16(label))
            header.append(struct.pack("<I", len(span)))
            header.append(struct.pack(f"<{len(span)}I", *span))
        blob = b"".join(header)
        stream.write(blob)
        written += len(blob)

        expected = [(token_count, h, w) for h, w in grids] * timesteps
        count = 0
        for block, shape in zip(blocks, expected):
            arr = np.ascontiguousarray(block, dtype="<f4")
            if arr.shape != shape:
                raise BridgeExportError(
                    f"block {count}: shape {arr.shape} does not match declared {shape}"
                )
            if not np.all(np.isfinite(arr)) or arr.min() < 0:
                raise BridgeExportError(f"block {count}: values must be finite and >= 0")
            payload = arr.tobytes()
            stream.write(payload)
            written += len(payload)
            count += 1
        if count != timesteps * len(grids):
            raise BridgeExportError(
                f"expected {timesteps * len(grids)} blocks, backend yielded {count}"
            )
    finally:
        if close:
            stream.close()
    return written


def write_embeddings(sink, ids: Sequence[str], values: np.ndarray) -> int:
    """Emit a kind-2 record; returns the byte count."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2 or arr.shape[0] != len(ids) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise BridgeExportError(f"embedding matrix shape {arr.shape} inconsistent with ids")
    if len(set(ids)) != len(ids):
        raise BridgeExportError("duplicate embedding ids")
    if not np.all(np.isfinite(arr)):
        raise BridgeExportError("non-finite embedding values")
    stream, close = _open(sink)
    try:
        parts = [MAGIC, struct.pack("<HH", VERSION, KIND_EMBEDDING_MATRIX)]
        parts.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
        for item_id in ids:
            parts.append(_str16(item_id))
        parts.append(arr.tobytes())
        blob = b"".join(parts)
        stream.write(blob)
        return len(blob)
    finally:
        if close:
            stream.close()
