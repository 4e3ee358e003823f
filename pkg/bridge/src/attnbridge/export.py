"""Export operations: attention stacks, embeddings, transcripts, captions.

Jobs fail fast: label spans are computed from the tokenizer before any
model work.  Heads are averaged inside each block at export time, so the
emitted stacks carry one map per (timestep, block, token).  Every run
writes a sidecar JSON recording the backend and its knobs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nada1_writer import STACK_SUFFIX, BridgeExportError, write_embeddings, write_stack_streaming
from .spans import compute_label_spans

INVERSION_STEPS = 500
RECONSTRUCTION_STEPS = 50


@dataclass(frozen=True)
class InversionJob:
    """One image to invert and reconstruct under a prompt."""

    image_ref: str
    image_id: str
    prompt: str
    labels: tuple[str, ...]
    inversion_steps: int = INVERSION_STEPS
    reconstruction_steps: int = RECONSTRUCTION_STEPS

    def __post_init__(self):
        if self.inversion_steps < 1 or self.reconstruction_steps < 1:
            raise BridgeExportError("step counts must be positive")
        if not self.labels:
            raise BridgeExportError(f"job {self.image_id}: no labels requested")


@dataclass
class ExportSummary:
    written: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)


def export_attention_stack(job: InversionJob, backend, out_dir) -> Path:
    """Run inversion + reconstruction and write one stack file.

    Spans come from the backend tokenizer and are validated before the
    first model call; a prompt that does not contain every label fails
    here, cheaply.
    """
    prompt_tokens = backend.tokenize(job.prompt)
    spans = compute_label_spans(
        prompt_tokens, {label: backend.tokenize(label) for label in job.labels}
    )
    token_count = len(prompt_tokens)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{job.image_id}{STACK_SUFFIX}"

    def head_averaged_blocks():
        for block in backend.attention_blocks(
            job.image_ref, job.prompt, job.inversion_steps, job.reconstruction_steps
        ):
            arr = np.asarray(block, dtype=np.float32)
            if arr.ndim != 4:
                raise BridgeExportError(
                    f"backend produced a {arr.ndim}-d block, expected (heads, T, H, W)"
                )
            yield arr.mean(axis=0)

    blocks = head_averaged_blocks()
    # Pull one block first: real backends discover their grids while
    # producing the first reconstruction step.
    first = next(blocks, None)
    if first is None:
        raise BridgeExportError("backend produced no attention blocks")
    grids = list(getattr(backend, "grids", None) or ())
    if not grids:
        raise BridgeExportError("backend did not declare its block grids")

    def chain():
        yield first
        yield from blocks

    write_stack_streaming(
        path,
        image_id=job.image_id,
        timesteps=job.reconstruction_steps,
        grids=grids,
        token_count=token_count,
        label_spans=spans,
        blocks=chain(),
    )
    return path


def export_embeddings(items: list[tuple[str, str]], encoder, kind: str, out_path) -> Path:
    """Encode images or texts into one unit-norm kind-2 file.

    items: (id, reference) pairs; reference is an image path for
    kind="image" or the raw text for kind="text".
    """
    if kind not in ("image", "text"):
        raise BridgeExportError(f"unknown embedding kind {kind!r}")
    if not items:
        raise BridgeExportError("nothing to encode")
    ids = []
    rows = []
    for item_id, ref in items:
        vec = encoder.encode_image(ref) if kind == "image" else encoder.encode_text(ref)
        norm = float(np.linalg.norm(vec))
        if not np.isfinite(norm) or norm == 0.0:
            raise BridgeExportError(f"degenerate embedding for {item_id!r}")
        ids.append(item_id)
        rows.append(np.asarray(vec, dtype=np.float32) / norm)
    write_embeddings(out_path, ids, np.stack(rows))
    return Path(out_path)


def run_vlm(images: list[tuple[str, str]], vlm, kind: str, query: str | None,
            labels: tuple[str, ...] = (), out_path=None,
            per_class_template: str = "Is {label} in the painting?") -> ExportSummary:
    """Query the VLM per image (or per image and label) and record replies
    verbatim as a transcript stream; zero parsing happens here.

    Failures are recorded per image and the stream continues.
    """
    if kind in ("choice", "score"):
        if not query:
            raise BridgeExportError(f"kind {kind!r} needs a query text")
        jobs = [(image_id, ref, kind, None, query) for image_id, ref in images]
    elif kind == "yesno":
        if not labels:
            raise BridgeExportError("per-class mode needs labels")
        jobs = [
            (image_id, ref, "yesno", label, per_class_template.format(label=label))
            for image_id, ref in images
            for label in labels
        ]
    else:
        raise BridgeExportError(f"unknown transcript kind {kind!r}")

    summary = ExportSummary()
    with open(out_path, "w", encoding="utf-8") as out:
        for image_id, ref, rec_kind, label, text in jobs:
            try:
                response = vlm.respond(ref, text)
            except Exception as exc:  # model failures must not kill the batch
                summary.failed[image_id] = str(exc)
                continue
            doc = {"image_id": image_id, "kind": rec_kind, "response": response}
            if label is not None:
                doc["label"] = label
            out.write(json.dumps(doc, ensure_ascii=False) + "\n")
            summary.written.append(image_id)
    return summary


def caption_images(images: list[tuple[str, str, str]], vlm, tokenizer_backend,
                   out_path) -> ExportSummary:
    """Caption each (image_id, ref, label) and report the label's token
    start offset under the conditioning tokenizer (null when absent)."""
    summary = ExportSummary()
    with open(out_path, "w", encoding="utf-8") as out:
        for image_id, ref, label in images:
            try:
                caption = vlm.caption(ref, label)
            except Exception as exc:
                summary.failed[image_id] = str(exc)
                continue
            offset = None
            caption_tokens = tokenizer_backend.tokenize(caption)
            label_tokens = tokenizer_backend.tokenize(label)
            n = len(label_tokens)
            if n:
                for start in range(len(caption_tokens) - n + 1):
                    if caption_tokens[start : start + n] == label_tokens:
                        offset = start
                        break
            doc = {
                "image_id": image_id,
                "label": label,
                "caption": caption,
                "label_token_start": offset,
            }
            out.write(json.dumps(doc, ensure_ascii=False) + "\n")
            summary.written.append(image_id)
    return summary


def write_sidecar(out_dir, payload: dict) -> Path:
    """Record run parameters next to the exported artifacts."""
    path = Path(out_dir) / "export_run.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_manifest_images(path) -> tuple[list[str], list[dict]]:
    """Minimal manifest reader: (classes, image entries).

    The bridge reads the same manifest files as the engine but carries its
    own reader to stay decoupled.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        classes = [str(c) for c in doc["classes"]]
        images = [
            {
                "id": str(entry["id"]),
                "gt_labels": [str(l) for l in entry.get("gt_labels", [])],
            }
            for entry in doc.get("images", [])
        ]
    except (KeyError, TypeError) as exc:
        raise BridgeExportError(f"malformed manifest {path}: {exc}") from exc
    return classes, images
