"""Line-oriented record streams: proposals, detections, VLM transcripts.

Each stream is UTF-8 text with one JSON object per line, so partial
pipelines can be inspected and diffed with ordinary tools.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from ..errors import FormatError
from .types import Box

TRANSCRIPT_KINDS = ("choice", "score", "yesno")


@dataclass(frozen=True)
class TranscriptRecord:
    """One raw VLM exchange: which image, which query kind, verbatim reply."""

    image_id: str
    kind: str
    response: str
    label: str | None = None

    def __post_init__(self):
        if self.kind not in TRANSCRIPT_KINDS:
            raise FormatError(f"unknown transcript kind {self.kind!r}")


def _lines(path) -> Iterable[tuple[int, dict]]:
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
        if not isinstance(doc, dict):
            raise FormatError(f"{path}:{lineno}: record must be a JSON object")
        yield lineno, doc


def write_proposal_stream(records: Iterable[tuple[str, Sequence[tuple[str, float]]]], path) -> int:
    """Write (image_id, [(label, score), ...]) records; returns line count."""
    count = 0
    with open(path, "w", encoding="utf-8") as out:
        for image_id, entries in records:
            doc = {"image_id": image_id, "proposals": [[l, float(s)] for l, s in entries]}
            out.write(json.dumps(doc, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_proposal_stream(path) -> list[tuple[str, list[tuple[str, float]]]]:
    records = []
    for lineno, doc in _lines(path):
        try:
            image_id = str(doc["image_id"])
            entries = [(str(l), float(s)) for l, s in doc["proposals"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed proposal record: {exc}") from exc
        records.append((image_id, entries))
    return records


def write_detection_stream(records: Iterable[tuple[str, str, Box, float]], path) -> int:
    """Write (image_id, label, box, score) records; returns line count."""
    count = 0
    with open(path, "w", encoding="utf-8") as out:
        for image_id, label, box, score in records:
            doc = {
                "image_id": image_id,
                "label": label,
                "box": list(box.as_tuple()),
                "score": float(score),
            }
            out.write(json.dumps(doc, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_detection_stream(path) -> list[tuple[str, str, Box, float]]:
    records = []
    for lineno, doc in _lines(path):
        try:
            records.append(
                (
                    str(doc["image_id"]),
                    str(doc["label"]),
                    Box(*doc["box"]),
                    float(doc["score"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{lineno}: malformed detection record: {exc}") from exc
    return records


def write_transcript_stream(records: Iterable[TranscriptRecord], path) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as out:
        for rec in records:
            doc = {"image_id": rec.image_id, "kind": rec.kind, "response": rec.response}
            if rec.label is not None:
                doc["label"] = rec.label
            out.write(json.dumps(doc, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_transcript_stream(path) -> list[TranscriptRecord]:
    records = []
    for lineno, doc in _lines(path):
        try:
            records.append(
                TranscriptRecord(
                    image_id=str(doc["image_id"]),
                    kind=str(doc["kind"]),
                    response=str(doc["response"]),
                    label=None if doc.get("label") is None else str(doc["label"]),
                )
            )
        except KeyError as exc:
            raise FormatError(f"{path}:{lineno}: transcript record missing {exc}") from exc
    return records
