"""Batch commands for the bridge: export stacks, embeddings, transcripts."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backends import BACKENDS, diffusion_backend, encoder_backend, vlm_backend
from .export import (
    INVERSION_STEPS,
    RECONSTRUCTION_STEPS,
    BridgeExportError,
    InversionJob,
    caption_images,
    export_attention_stack,
    export_embeddings,
    load_manifest_images,
    run_vlm,
    write_sidecar,
)

DEFAULT_TEMPLATE = "A painting of {labels}"


def _joined(labels: list[str]) -> str:
    if len(labels) == 1:
        return labels[0]
    return ", ".join(labels[:-1]) + " and " + labels[-1]


def _image_items(manifest_path, images_dir, suffix: str) -> list[tuple[str, str]]:
    _, images = load_manifest_images(manifest_path)
    return [(e["id"], str(Path(images_dir) / f"{e['id']}{suffix}")) for e in images]


def cmd_export_stacks(args) -> int:
    _, images = load_manifest_images(args.manifest)
    backend = diffusion_backend(args.backend)
    prompts = {}
    if args.prompts:
        for line in Path(args.prompts).read_text(encoding="utf-8").splitlines():
            if line.strip():
                doc = json.loads(line)
                prompts[doc["image_id"]] = (doc["prompt"], list(doc["labels"]))
    written = 0
    failed = 0
    for entry in images:
        image_id = entry["id"]
        if image_id in prompts:
            prompt, labels = prompts[image_id]
        else:
            labels = entry["gt_labels"]
            if not labels:
                continue
            prompt = args.template.format(labels=_joined(labels))
        job = InversionJob(
            image_ref=str(Path(args.images) / f"{image_id}{args.image_suffix}"),
            image_id=image_id,
            prompt=prompt,
            labels=tuple(labels),
            inversion_steps=args.inversion_steps,
            reconstruction_steps=args.reconstruction_steps,
        )
        try:
            export_attention_stack(job, backend, args.out)
            written += 1
        except BridgeExportError as exc:
            failed += 1
            print(f"warning: {image_id}: {exc}", file=sys.stderr)
    write_sidecar(args.out, {
        "backend": backend.name,
        "inversion_steps": args.inversion_steps,
        "reconstruction_steps": args.reconstruction_steps,
        "template": args.template,
        "stacks_written": written,
        "stacks_failed": failed,
    })
    print(f"export-stacks: {written} written, {failed} failed", file=sys.stderr)
    return 0 if written or not failed else 1


def cmd_export_embeddings(args) -> int:
    encoder = encoder_backend(args.backend)
    if args.kind == "image":
        items = _image_items(args.manifest, args.images, args.image_suffix)
    else:
        classes, _ = load_manifest_images(args.manifest)
        items = [(c, args.text_template.format(label=c)) for c in classes]
    export_embeddings(items, encoder, args.kind, args.out)
    print(f"export-embeddings: {len(items)} rows -> {args.out}", file=sys.stderr)
    return 0


def cmd_vlm(args) -> int:
    classes, _ = load_manifest_images(args.manifest)
    images = _image_items(args.manifest, args.images, args.image_suffix)
    vlm = vlm_backend(args.backend, classes=tuple(classes))
    labels = tuple(classes) if args.kind == "yesno" else ()
    summary = run_vlm(images, vlm, args.kind, args.query, labels=labels, out_path=args.out)
    print(
        f"vlm[{args.kind}]: {len(summary.written)} transcripts, "
        f"{len(summary.failed)} failures",
        file=sys.stderr,
    )
    return 0


def cmd_caption(args) -> int:
    _, entries = load_manifest_images(args.manifest)
    vlm = vlm_backend(args.backend)
    tokenizer = diffusion_backend(args.backend)
    triples = [
        (e["id"], str(Path(args.images) / f"{e['id']}{args.image_suffix}"), label)
        for e in entries
        for label in e["gt_labels"]
    ]
    summary = caption_images(triples, vlm, tokenizer, args.out)
    print(
        f"caption: {len(summary.written)} captions, {len(summary.failed)} failures",
        file=sys.stderr,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnbridge",
        description="Run frozen models and export engine-format artifacts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-stacks", help="attention stacks via inversion + reconstruction")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True, help="directory of source images")
    p.add_argument("--out", required=True)
    p.add_argument("--backend", default="synthetic", choices=list(BACKENDS))
    p.add_argument("--template", default=DEFAULT_TEMPLATE,
                   help="prompt template; {labels} is replaced per image")
    p.add_argument("--prompts", help="JSONL of {image_id, prompt, labels} overrides")
    p.add_argument("--inversion-steps", type=int, default=INVERSION_STEPS)
    p.add_argument("--reconstruction-steps", type=int, default=RECONSTRUCTION_STEPS)
    p.add_argument("--image-suffix", default=".jpg")
    p.set_defaults(func=cmd_export_stacks)

    p = sub.add_parser("export-embeddings", help="unit-norm image or class-text embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", help="directory of source images (kind=image)")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", required=True, choices=["image", "text"])
    p.add_argument("--backend", default="synthetic", choices=list(BACKENDS))
    p.add_argument("--text-template", default="A painting of {label}")
    p.add_argument("--image-suffix", default=".jpg")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("vlm", help="record verbatim VLM transcripts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", required=True, choices=["choice", "score", "yesno"])
    p.add_argument("--query", help="query text for choice/score kinds")
    p.add_argument("--backend", default="synthetic", choices=list(BACKENDS))
    p.add_argument("--image-suffix", default=".jpg")
    p.set_defaults(func=cmd_vlm)

    p = sub.add_parser("caption", help="captions with label token offsets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", default="synthetic", choices=list(BACKENDS))
    p.add_argument("--image-suffix", default=".jpg")
    p.set_defaults(func=cmd_caption)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BridgeExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
