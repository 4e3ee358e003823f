"""Dataset manifests: JSON load/save plus the built-in class vocabularies."""
from __future__ import annotations

import json
from pathlib import Path

from ..errors import ValidationError
from .types import Box, DatasetManifest, ImageRecord

# Ten Christian-icon classes named by their Wikipedia article titles.
ARTDL_CLASSES = (
    "Anthony of Padua",
    "John the Baptist",
    "Paul the Apostle",
    "Francis of Assisi",
    "Mary Magdalene",
    "Saint Jerome",
    "Saint Dominic",
    "Mary, mother of Jesus",
    "Saint Peter",
    "Saint Sebastian",
)

# Seven classes in their rendered (already remapped) form.
ICONART_CLASSES = (
    "person",
    "crucifixion of jesus",
    "angel",
    "mary",
    "baby",
    "naked person",
    "ruins",
)

BUILTIN_VOCABULARIES = {
    "artdl": ARTDL_CLASSES,
    "iconart": ICONART_CLASSES,
}


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ValidationError(f"{context}: missing field {key!r}")
    return mapping[key]


def manifest_from_dict(doc: dict) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ValidationError("manifest: top level must be an object")
    name = str(_require(doc, "name", "manifest"))
    classes = _require(doc, "classes", "manifest")
    if not isinstance(classes, list):
        raise ValidationError("manifest: 'classes' must be a list")
    raw_images = doc.get("images", [])
    if not isinstance(raw_images, list):
        raise ValidationError("manifest: 'images' must be a list")
    images = []
    for entry in raw_images:
        if not isinstance(entry, dict):
            raise ValidationError("manifest: image entries must be objects")
        image_id = str(_require(entry, "id", "manifest image"))
        context = f"manifest image {image_id!r}"
        width = int(_require(entry, "width", context))
        height = int(_require(entry, "height", context))
        gt_labels = entry.get("gt_labels", [])
        if not isinstance(gt_labels, list):
            raise ValidationError(f"{context}: 'gt_labels' must be a list")
        gt_boxes = []
        for raw_box in entry.get("gt_boxes", []):
            if not (isinstance(raw_box, list) and len(raw_box) == 2):
                raise ValidationError(f"{context}: each gt box must be [label, [x0,y0,x1,y1]]")
            label, coords = raw_box
            if not (isinstance(coords, list) and len(coords) == 4):
                raise ValidationError(f"{context}: box coordinates must be [x0,y0,x1,y1]")
            gt_boxes.append((str(label), Box(*coords)))
        images.append(
            ImageRecord(
                id=image_id,
                width=width,
                height=height,
                gt_labels=tuple(str(l) for l in gt_labels),
                gt_boxes=tuple(gt_boxes),
            )
        )
    return DatasetManifest(name=name, classes=tuple(str(c) for c in classes), images=tuple(images))


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "name": manifest.name,
        "classes": list(manifest.classes),
        "images": [
            {
                "id": rec.id,
                "width": rec.width,
                "height": rec.height,
                "gt_labels": list(rec.gt_labels),
                "gt_boxes": [[label, list(box.as_tuple())] for label, box in rec.gt_boxes],
            }
            for rec in manifest.images
        ],
    }


def load_manifest(path) -> DatasetManifest:
    """Read and fully validate a manifest file; never returns a partial one."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path}: invalid JSON: {exc}") from exc
    return manifest_from_dict(doc)


def save_manifest(manifest: DatasetManifest, path) -> None:
    manifest.validate()
    text = json.dumps(manifest_to_dict(manifest), indent=2, ensure_ascii=False)
    Path(path).write_text(text + "\n", encoding="utf-8")
