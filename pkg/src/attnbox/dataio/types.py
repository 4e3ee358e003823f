"""Core domain types: boxes, dataset manifests, attention stacks, embeddings.

All types validate their invariants at construction time and raise
ValidationError on violation, so downstream code never sees a partially
valid object.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, corners ordered x0<x1, y0<y1."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        object.__setattr__(self, "x0", float(self.x0))
        object.__setattr__(self, "y0", float(self.y0))
        object.__setattr__(self, "x1", float(self.x1))
        object.__setattr__(self, "y1", float(self.y1))
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValidationError(
                f"degenerate box ({self.x0}, {self.y0}, {self.x1}, {self.y1}): "
                "corners must satisfy x0 < x1 and y0 < y1"
            )

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class ImageRecord:
    """One dataset image: id, pixel dims, and its ground-truth annotations."""

    id: str
    width: int
    height: int
    gt_labels: tuple[str, ...] = ()
    gt_boxes: tuple[tuple[str, Box], ...] = ()

    def __post_init__(self):
        self.gt_labels = tuple(self.gt_labels)
        self.gt_boxes = tuple((label, box) for label, box in self.gt_boxes)
        self.validate()

    def validate(self):
        if not self.id:
            raise ValidationError("image record with empty id")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"image {self.id}: non-positive dimensions")
        if len(set(self.gt_labels)) != len(self.gt_labels):
            raise ValidationError(f"image {self.id}: duplicate ground-truth labels")
        label_set = set(self.gt_labels)
        for label, box in self.gt_boxes:
            if label not in label_set:
                raise ValidationError(
                    f"image {self.id}: box label {label!r} missing from gt_labels"
                )
            if box.x0 < 0 or box.y0 < 0 or box.x1 > self.width or box.y1 > self.height:
                raise ValidationError(
                    f"image {self.id}: box {box.as_tuple()} outside "
                    f"{self.width}x{self.height} image"
                )


@dataclass
class DatasetManifest:
    """A named class vocabulary plus the image records of one split."""

    name: str
    classes: tuple[str, ...]
    images: tuple[ImageRecord, ...] = ()

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.images = tuple(self.images)
        self.validate()

    def validate(self):
        if not self.classes:
            raise ValidationError(f"manifest {self.name!r}: empty class vocabulary")
        if len(set(self.classes)) != len(self.classes):
            raise ValidationError(f"manifest {self.name!r}: duplicate classes")
        seen_ids: set[str] = set()
        class_set = set(self.classes)
        for record in self.images:
            if record.id in seen_ids:
                raise ValidationError(f"manifest {self.name!r}: duplicate image id {record.id!r}")
            seen_ids.add(record.id)
            for label in record.gt_labels:
                if label not in class_set:
                    raise ValidationError(
                        f"manifest {self.name!r}: image {record.id}: "
                        f"label {label!r} outside vocabulary"
                    )

    def record(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.id == image_id:
                return rec
        raise KeyError(image_id)


def _as_float32_map(arr, what: str) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{what}: non-finite values")
    return out


@dataclass(eq=False)
class AttentionStack:
    """Raw per-timestep, per-block, per-token attention maps for one image.

    ``data[j][k]`` is a float32 array of shape (T, H_k, W_k): the T token
    maps of block k at timestep j.  ``label_spans`` maps each label to the
    token indices that spell it inside the conditioning prompt; spans are
    computed by the producer, never here.
    """

    image_id: str
    label_spans: dict[str, tuple[int, ...]]
    data: tuple[tuple[np.ndarray, ...], ...]

    def __post_init__(self):
        self.label_spans = {
            str(label): tuple(int(i) for i in span)
            for label, span in self.label_spans.items()
        }
        self.data = tuple(
            tuple(_as_float32_map(block, f"stack {self.image_id}: block ({j},{k})")
                  for k, block in enumerate(row))
            for j, row in enumerate(self.data)
        )
        self.validate()

    @property
    def J(self) -> int:
        return len(self.data)

    @property
    def K(self) -> int:
        return len(self.data[0])

    @property
    def T(self) -> int:
        return self.data[0][0].shape[0]

    @property
    def grids(self) -> tuple[tuple[int, int], ...]:
        return tuple((blk.shape[1], blk.shape[2]) for blk in self.data[0])

    def validate(self):
        if not self.image_id:
            raise ValidationError("attention stack with empty image id")
        if len(self.data) < 1:
            raise ValidationError(f"stack {self.image_id}: J must be >= 1")
        k_count = len(self.data[0])
        if k_count < 1:
            raise ValidationError(f"stack {self.image_id}: K must be >= 1")
        t_count = None
        for j, row in enumerate(self.data):
            if len(row) != k_count:
                raise ValidationError(
                    f"stack {self.image_id}: timestep {j} has {len(row)} blocks, expected {k_count}"
                )
            for k, blk in enumerate(row):
                if blk.ndim != 3:
                    raise ValidationError(
                        f"stack {self.image_id}: block ({j},{k}) is not a (T,H,W) array"
                    )
                if t_count is None:
                    t_count = blk.shape[0]
                if blk.shape[0] != t_count:
                    raise ValidationError(
                        f"stack {self.image_id}: inconsistent token count at block ({j},{k})"
                    )
                if blk.shape != self.data[0][k].shape:
                    raise ValidationError(
                        f"stack {self.image_id}: block ({j},{k}) grid differs across timesteps"
                    )
                if blk.shape[1] < 1 or blk.shape[2] < 1:
                    raise ValidationError(
                        f"stack {self.image_id}: block ({j},{k}) has an empty grid"
                    )
                if np.any(blk < 0):
                    raise ValidationError(
                        f"stack {self.image_id}: negative attention values in block ({j},{k})"
                    )
        if t_count is None or t_count < 1:
            raise ValidationError(f"stack {self.image_id}: T must be >= 1")
        if not self.label_spans:
            raise ValidationError(f"stack {self.image_id}: no label spans")
        for label, span in self.label_spans.items():
            if not label:
                raise ValidationError(f"stack {self.image_id}: empty label in span table")
            if len(span) == 0:
                raise ValidationError(f"stack {self.image_id}: empty span for {label!r}")
            for idx in span:
                if idx < 0 or idx >= t_count:
                    raise ValidationError(
                        f"stack {self.image_id}: span index {idx} for {label!r} "
                        f"out of range [0, {t_count})"
                    )

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttentionStack):
            return NotImplemented
        if self.image_id != other.image_id or self.label_spans != other.label_spans:
            return False
        if self.J != other.J or self.K != other.K:
            return False
        for row_a, row_b in zip(self.data, other.data):
            for blk_a, blk_b in zip(row_a, row_b):
                if blk_a.shape != blk_b.shape or blk_a.tobytes() != blk_b.tobytes():
                    return False
        return True


@dataclass(eq=False)
class EmbeddingMatrix:
    """N named rows of D-dimensional float32 vectors."""

    ids: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.ids = tuple(str(i) for i in self.ids)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.validate()

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def validate(self):
        if self.values.ndim != 2:
            raise ValidationError("embedding matrix values must be 2-dimensional")
        n, d = self.values.shape
        if n < 1 or d < 1:
            raise ValidationError("embedding matrix must have N >= 1 and D >= 1")
        if len(self.ids) != n:
            raise ValidationError(f"embedding matrix: {len(self.ids)} ids for {n} rows")
        if len(set(self.ids)) != len(self.ids):
            dupes = sorted({i for i in self.ids if self.ids.count(i) > 1})
            raise ValidationError(f"embedding matrix: duplicate ids {dupes}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("embedding matrix: non-finite values")

    def row(self, item_id: str) -> np.ndarray:
        try:
            idx = self.ids.index(item_id)
        except ValueError:
            raise KeyError(item_id) from None
        return self.values[idx]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )
