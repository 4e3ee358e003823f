"""Deterministic synthetic fixtures: attention stacks with known boxes.

Each fixture image places 1-3 labeled blobs on the attention grid.  A blob
is an isotropic flat-top bump: value 1.0 out to 95% of the distance from
the box center to the box edge, then a Gaussian skirt calibrated to reach
~0.05 at the edge, over a uniform 0.01 background.  The flat top makes the
map histogram bimodal, so threshold selection recovers the ground-truth
box almost exactly; a plain Gaussian profile does not (its histogram has
no valley and thresholding recovers a region far smaller than the box).

Token map t holds the blob of label t; spans are one token per label.
Maps are replicated across all (timestep, block) pairs with small
independent uniform noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ValidationError
from .manifest import save_manifest
from .nada1 import STACK_SUFFIX, write_attention_stack
from .types import AttentionStack, Box, DatasetManifest, ImageRecord

DEFAULT_FIXTURE_CLASSES = ("saint", "angel", "dragon", "horse", "banner", "ruins")

_BACKGROUND = 0.01
_EDGE_VALUE = 0.05
_CORE_FRACTION = 0.95


@dataclass(frozen=True)
class FixtureSpec:
    """Knobs for the generator; identical spec + seed gives identical bytes."""

    images: int = 50
    classes: tuple[str, ...] = DEFAULT_FIXTURE_CLASSES
    seed: int = 0
    grid: tuple[int, int] = (64, 64)
    image_size: tuple[int, int] = (512, 512)  # (width, height)
    blobs: tuple[int, int] = (1, 3)
    timesteps: int = 2
    blocks: int = 2
    noise: float = 0.004

    def validate(self):
        if self.images < 1:
            raise ValidationError("fixture spec: need at least one image")
        if not self.classes:
            raise ValidationError("fixture spec: empty class list")
        grid_h, grid_w = self.grid
        width, height = self.image_size
        if grid_h > height or grid_w > width:
            raise ValidationError(
                f"fixture spec: grid {grid_h}x{grid_w} larger than image {width}x{height}"
            )
        if self.blobs[0] < 1 or self.blobs[1] < self.blobs[0]:
            raise ValidationError("fixture spec: blob count range must be 1 <= lo <= hi")
        if self.timesteps < 1 or self.blocks < 1:
            raise ValidationError("fixture spec: timesteps and blocks must be >= 1")
        if min(self.grid) < 16:
            raise ValidationError("fixture spec: grid must be at least 16x16")


def _blob_map(grid: tuple[int, int], cy: int, cx: int, half_side: int) -> np.ndarray:
    grid_h, grid_w = grid
    edge = half_side + 0.5
    core = _CORE_FRACTION * edge
    sigma = (edge - core) / np.sqrt(2.0 * np.log(1.0 / _EDGE_VALUE))
    yy, xx = np.mgrid[0:grid_h, 0:grid_w]
    radius = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    skirt = np.exp(-np.maximum(radius - core, 0.0) ** 2 / (2.0 * sigma**2))
    bump = np.where(radius <= core, 1.0, skirt)
    return np.maximum(bump, _BACKGROUND)


def make_fixture_image(spec: FixtureSpec, rng: np.random.Generator, index: int
                       ) -> tuple[AttentionStack, ImageRecord]:
    """Generate one image's stack and its ground-truth record."""
    grid_h, grid_w = spec.grid
    width, height = spec.image_size
    scale_x = width / grid_w
    scale_y = height / grid_h
    d_lo = max(3, min(grid_h, grid_w) // 16)
    d_hi = max(d_lo + 1, min(grid_h, grid_w) // 5)

    n_blobs = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
    n_blobs = min(n_blobs, len(spec.classes))
    label_indices = rng.choice(len(spec.classes), size=n_blobs, replace=False)
    labels = [spec.classes[int(i)] for i in label_indices]

    base_maps = []
    gt_boxes = []
    for label in labels:
        d = int(rng.integers(d_lo, d_hi + 1))
        cy = int(rng.integers(d + 1, grid_h - d - 1))
        cx = int(rng.integers(d + 1, grid_w - d - 1))
        base_maps.append(_blob_map(spec.grid, cy, cx, d))
        gt_boxes.append(
            (
                label,
                Box(
                    (cx - d) * scale_x,
                    (cy - d) * scale_y,
                    (cx + d + 1) * scale_x,
                    (cy + d + 1) * scale_y,
                ),
            )
        )

    data = []
    for _ in range(spec.timesteps):
        row = []
        for _ in range(spec.blocks):
            block = np.empty((n_blobs, grid_h, grid_w), dtype=np.float32)
            for t, base in enumerate(base_maps):
                noisy = base + rng.uniform(0.0, spec.noise, size=base.shape)
                block[t] = noisy.astype(np.float32)
            row.append(block)
        data.append(tuple(row))

    image_id = f"fx{index:04d}"
    stack = AttentionStack(
        image_id=image_id,
        label_spans={label: (t,) for t, label in enumerate(labels)},
        data=tuple(data),
    )
    record = ImageRecord(
        id=image_id,
        width=width,
        height=height,
        gt_labels=tuple(labels),
        gt_boxes=tuple(gt_boxes),
    )
    return stack, record


def generate_fixtures(spec: FixtureSpec, out_dir) -> tuple[list[Path], Path]:
    """Write one stack file per image plus a manifest; returns their paths."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    stack_paths = []
    records = []
    for index in range(spec.images):
        stack, record = make_fixture_image(spec, rng, index)
        path = out / f"{stack.image_id}{STACK_SUFFIX}"
        write_attention_stack(stack, path)
        stack_paths.append(path)
        records.append(record)
    manifest = DatasetManifest(name="fixtures", classes=spec.classes, images=tuple(records))
    manifest_path = out / "manifest.json"
    save_manifest(manifest, manifest_path)
    return stack_paths, manifest_path
