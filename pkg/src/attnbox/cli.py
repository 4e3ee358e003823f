"""Batch command-line surface: fixtures, detect, propose, train, eval, sweep.

All commands are deterministic given their flags, seeds, and inputs.
Stacks are processed one image at a time so memory stays bounded by a
single stack regardless of dataset size.  Warnings (e.g. a proposed label
with no span in its stack) are counted and reported on stderr but never
change outputs or the exit status.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio, evalkit, proposer, segbox
from .attnagg import align_maps, label_map
from .dataio import (
    BUILTIN_VOCABULARIES,
    DEFAULT_FIXTURE_CLASSES,
    STACK_SUFFIX,
    DatasetManifest,
    FixtureSpec,
    generate_fixtures,
    load_manifest,
)
from .errors import AttnboxError, ValidationError

DATA_DIR_ENV = "NADA_DATA_DIR"

SWEEP_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def _resolve(path: str | None) -> Path | None:
    """Relative paths resolve under $NADA_DATA_DIR when it is set."""
    if path is None:
        return None
    p = Path(path)
    root = os.environ.get(DATA_DIR_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _parse_pair(text: str, what: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ValidationError(f"{what} must look like 64x64, got {text!r}") from None


def _parse_threshold(text: str) -> float | str:
    if text == "otsu":
        return "otsu"
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"threshold must be 'otsu' or a number, got {text!r}") from None


def _extraction_config(args) -> segbox.ExtractionConfig:
    return segbox.ExtractionConfig(
        threshold=_parse_threshold(args.threshold),
        min_region_area_fraction=args.min_area_fraction,
        marker_min_distance_fraction=args.marker_min_distance,
        normalize=not args.no_normalize,
    )


# ---------------------------------------------------------------------------
# detection pipeline (shared by detect and sweep)
# ---------------------------------------------------------------------------


def _detect_one(
    stack_path: Path,
    record: dataio.ImageRecord,
    entries: list[tuple[str, float]],
    config: segbox.ExtractionConfig,
    uniform_scores: bool,
) -> tuple[list[evalkit.Detection], int]:
    stack = dataio.read_attention_stack(stack_path)
    aligned = align_maps(stack)
    detections: list[evalkit.Detection] = []
    missing_spans = 0
    for label, score in entries:
        if label not in aligned.label_spans:
            missing_spans += 1
            continue
        m = label_map(aligned, label)
        for box, saliency in segbox.extract_boxes(m, (record.width, record.height), config):
            confidence = 1.0 if uniform_scores else score * saliency
            detections.append(
                evalkit.Detection(
                    image_id=record.id, label=label, box=box, confidence=confidence
                )
            )
    return detections, missing_spans


def run_detection(
    manifest: DatasetManifest,
    stacks_dir: Path,
    proposals: list[tuple[str, list[tuple[str, float]]]],
    config: segbox.ExtractionConfig,
    uniform_scores: bool = False,
    parallel: int = 1,
) -> tuple[list[evalkit.Detection], dict[str, int]]:
    """Detect over a split in manifest order; returns (detections, warnings)."""
    records = {rec.id: rec for rec in manifest.images}
    by_image: dict[str, list[tuple[str, float]]] = {}
    for image_id, entries in proposals:
        if image_id not in records:
            raise ValidationError(f"proposals for unknown image {image_id!r}")
        by_image.setdefault(image_id, []).extend(entries)

    work = [
        (rec, by_image[rec.id])
        for rec in manifest.images
        if rec.id in by_image and by_image[rec.id]
    ]

    def task(item):
        rec, entries = item
        stack_path = stacks_dir / f"{rec.id}{STACK_SUFFIX}"
        if not stack_path.exists():
            raise AttnboxError(f"missing stack file {stack_path}")
        return _detect_one(stack_path, rec, entries, config, uniform_scores)

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(task, work))
    else:
        results = [task(item) for item in work]

    detections: list[evalkit.Detection] = []
    missing_spans = 0
    for dets, missing in results:
        detections.extend(dets)
        missing_spans += missing
    return detections, {"images": len(work), "missing_spans": missing_spans}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fixtures(args) -> int:
    if args.images < 1:
        raise ValidationError("--images must be >= 1")
    if args.classes in BUILTIN_VOCABULARIES:
        classes = BUILTIN_VOCABULARIES[args.classes]
    elif args.classes == "default":
        classes = DEFAULT_FIXTURE_CLASSES
    else:
        classes = tuple(c.strip() for c in args.classes.split(",") if c.strip())
    spec = FixtureSpec(
        images=args.images,
        classes=classes,
        seed=args.seed,
        grid=_parse_pair(args.grid, "--grid"),
        image_size=_parse_pair(args.image_size, "--image-size"),
        blobs=(args.min_blobs, args.max_blobs),
    )
    out_dir = _resolve(args.out)
    stack_paths, manifest_path = generate_fixtures(spec, out_dir)
    print(f"wrote {len(stack_paths)} stack files and {manifest_path}")
    return 0


def cmd_detect(args) -> int:
    manifest = load_manifest(_resolve(args.manifest))
    proposals = dataio.read_proposal_stream(_resolve(args.proposals))
    config = _extraction_config(args)
    detections, warnings = run_detection(
        manifest,
        _resolve(args.stacks),
        proposals,
        config,
        uniform_scores=args.uniform_scores,
        parallel=args.parallel,
    )
    out = _resolve(args.out)
    dataio.write_detection_stream(
        ((d.image_id, d.label, d.box, d.confidence) for d in detections), out
    )
    print(
        f"detect: {warnings['images']} images, {len(detections)} detections, "
        f"{warnings['missing_spans']} proposals skipped (no span)",
        file=sys.stderr,
    )
    return 0


def _load_labeled_ids(manifest: DatasetManifest) -> dict[str, list[str]]:
    return {rec.id: list(rec.gt_labels) for rec in manifest.images if rec.gt_labels}


def cmd_propose(args) -> int:
    manifest = load_manifest(_resolve(args.manifest))
    skipped = 0
    if args.kind == "oracle":
        proposal_sets = [proposer.oracle_propose(rec) for rec in manifest.images]
    elif args.kind == "wscp":
        embeddings = dataio.read_embedding_matrix(_resolve(args.embeddings))
        model = proposer.load_mlp_checkpoint(_resolve(args.model))
        proposal_sets = []
        for rec in manifest.images:
            if rec.id not in embeddings.ids:
                skipped += 1
                continue
            scores = proposer.wscp_infer(model, embeddings.row(rec.id))
            proposal_sets.append(
                proposer.select_labels(rec.id, scores, manifest.classes, model.head)
            )
    elif args.kind in ("zscp-choice", "zscp-score", "yesno"):
        transcripts = dataio.read_transcript_stream(_resolve(args.transcripts))
        kind = {"zscp-choice": "choice", "zscp-score": "score", "yesno": "yesno"}[args.kind]
        proposal_sets, skipped = proposer.propose_from_transcripts(
            transcripts, manifest.classes, kind, tau=args.tau
        )
    elif args.kind == "clip":
        images = dataio.read_embedding_matrix(_resolve(args.embeddings))
        texts = dataio.read_embedding_matrix(_resolve(args.text_embeddings))
        missing = [c for c in manifest.classes if c not in texts.ids]
        if missing:
            raise ValidationError(f"text embeddings missing classes {missing}")
        class_rows = dataio.EmbeddingMatrix(
            ids=manifest.classes,
            values=np.stack([texts.row(c) for c in manifest.classes]),
        )
        proposal_sets = []
        for rec in manifest.images:
            if rec.id not in images.ids:
                skipped += 1
                continue
            proposal_sets.append(
                proposer.clip_propose(
                    rec.id, images.row(rec.id), class_rows, threshold=args.sim_threshold
                )
            )
    else:
        raise ValidationError(f"unknown proposer kind {args.kind!r}")

    count = dataio.write_proposal_stream(
        ((p.image_id, list(p.entries)) for p in proposal_sets), _resolve(args.out)
    )
    print(f"propose[{args.kind}]: {count} records, {skipped} skipped", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    manifest = load_manifest(_resolve(args.manifest))
    embeddings = dataio.read_embedding_matrix(_resolve(args.embeddings))
    loss = args.loss
    if loss == "auto":
        loss = proposer.LOSS_CROSS_ENTROPY if args.head == "single" else proposer.LOSS_BCE
    config = proposer.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        loss=loss,
        seed=args.seed,
    )
    result = proposer.wscp_train(
        embeddings,
        _load_labeled_ids(manifest),
        manifest.classes,
        layers=args.layers,
        head=args.head,
        config=config,
    )
    proposer.save_mlp_checkpoint(result.model, _resolve(args.out))
    print(f"train: final loss {result.final_loss:.6f} -> {args.out}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(_resolve(args.manifest))
    detection_report = None
    classification_report = None
    if args.detections:
        records = dataio.read_detection_stream(_resolve(args.detections))
        detections = [
            evalkit.Detection(image_id=i, label=l, box=b, confidence=s)
            for i, l, b, s in records
        ]
        detection_report = evalkit.detection_ap50(
            detections, manifest, iou_threshold=args.iou_threshold
        )
    if args.proposals:
        raw = dataio.read_proposal_stream(_resolve(args.proposals))
        proposal_sets = [
            proposer.ProposalSet(image_id=i, entries=tuple(entries)) for i, entries in raw
        ]
        classification_report = evalkit.classification_metrics(proposal_sets, manifest)
    if detection_report is None and classification_report is None:
        raise ValidationError("eval needs --detections and/or --proposals")
    report = evalkit.merge_reports(detection_report, classification_report)
    print(evalkit.render_report(report), end="")
    if args.json:
        Path(_resolve(args.json)).write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    return 0


def run_sweep(
    manifest: DatasetManifest,
    stacks_dir: Path,
    proposals: list[tuple[str, list[tuple[str, float]]]],
    base_config: segbox.ExtractionConfig,
    uniform_scores: bool = False,
    parallel: int = 1,
) -> list[tuple[str, float | None]]:
    """AP50 per threshold: the fixed grid 0.1..0.9 plus the Otsu row."""
    rows: list[tuple[str, float | None]] = []
    modes: list[tuple[str, float | str]] = [(f"{t:.1f}", t) for t in SWEEP_THRESHOLDS]
    modes.append(("otsu", "otsu"))
    for name, threshold in modes:
        config = segbox.ExtractionConfig(
            threshold=threshold,
            min_region_area_fraction=base_config.min_region_area_fraction,
            marker_min_distance_fraction=base_config.marker_min_distance_fraction,
            normalize=base_config.normalize,
        )
        detections, _ = run_detection(
            manifest, stacks_dir, proposals, config, uniform_scores, parallel
        )
        report = evalkit.detection_ap50(detections, manifest)
        rows.append((name, report.detection_macro_ap50))
    return rows


def cmd_sweep(args) -> int:
    manifest = load_manifest(_resolve(args.manifest))
    proposals = dataio.read_proposal_stream(_resolve(args.proposals))
    base_config = segbox.ExtractionConfig(
        min_region_area_fraction=args.min_area_fraction,
        marker_min_distance_fraction=args.marker_min_distance,
        normalize=not args.no_normalize,
    )
    rows = run_sweep(
        manifest,
        _resolve(args.stacks),
        proposals,
        base_config,
        uniform_scores=args.uniform_scores,
        parallel=args.parallel,
    )
    print(f"{'threshold':<12} {'macro_ap50':>10}")
    for name, ap in rows:
        print(f"{name:<12} {('-' if ap is None else f'{ap:.4f}'):>10}")
    if args.json:
        doc = [{"threshold": name, "macro_ap50": ap} for name, ap in rows]
        Path(_resolve(args.json)).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_extraction_flags(p: argparse.ArgumentParser, with_threshold: bool = True):
    if with_threshold:
        p.add_argument("--threshold", default="otsu", help="'otsu' or a fixed value in (0,1)")
    p.add_argument("--min-area-fraction", type=float, default=0.005)
    p.add_argument("--marker-min-distance", type=float, default=0.125)
    p.add_argument("--no-normalize", action="store_true", help="skip min-max normalization")
    p.add_argument("--uniform-scores", action="store_true", help="force confidence 1.0")
    p.add_argument("--parallel", type=int, default=1, help="worker pool size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnbox",
        description="Detection from exported cross-attention stacks.",
        epilog=f"Relative paths resolve under ${DATA_DIR_ENV} when it is set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", help="generate synthetic stacks and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", default="64x64")
    p.add_argument("--image-size", default="512x512")
    p.add_argument("--classes", default="default", help="'default', 'artdl', 'iconart', or a comma list")
    p.add_argument("--min-blobs", type=int, default=1)
    p.add_argument("--max-blobs", type=int, default=3)
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("detect", help="boxes from stacks and proposals")
    p.add_argument("--stacks", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_extraction_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("propose", help="per-image class proposals")
    p.add_argument("--kind", required=True,
                   choices=["wscp", "zscp-choice", "zscp-score", "clip", "yesno", "oracle"])
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings", help="image embeddings (wscp, clip)")
    p.add_argument("--model", help="MLP checkpoint (wscp)")
    p.add_argument("--transcripts", help="transcript stream (zscp-*, yesno)")
    p.add_argument("--text-embeddings", help="class text embeddings (clip)")
    p.add_argument("--tau", type=float, default=proposer.SCORE_TAU)
    p.add_argument("--sim-threshold", type=float, default=proposer.CLIP_SIMILARITY_THRESHOLD)
    p.set_defaults(func=cmd_propose)

    p = sub.add_parser("train", help="train the embedding classifier")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=2, choices=[2, 3])
    p.add_argument("--head", default="single", choices=["single", "multi"])
    p.add_argument("--loss", default="auto", choices=["auto", "cross_entropy", "bce"])
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="detection and/or classification report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--detections")
    p.add_argument("--proposals")
    p.add_argument("--iou-threshold", type=float, default=evalkit.IOU_THRESHOLD)
    p.add_argument("--json", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="AP50 across fixed thresholds plus Otsu")
    p.add_argument("--stacks", required=True)
    p.add_argument("--proposals", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--json", help="also write the table as JSON")
    _add_extraction_flags(p, with_threshold=False)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AttnboxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
