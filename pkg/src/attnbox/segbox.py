"""Turn a label map into boxes: normalize, threshold, watershed, extract.

Thresholding is Otsu's method by default (256-bin between-class variance
maximization) or a fixed value.  Foreground is split with a marker-based
watershed: markers are local maxima of the Euclidean distance transform
with a minimum mutual separation, flooding runs over the negated distance
transform restricted to the foreground.  Connectivity is 8-neighborhood
throughout, and flooding order is fully deterministic (distance, then
insertion order), so region ids are reproducible.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .attnagg import LabelMap
from .dataio.types import Box
from .errors import ValidationError

_EIGHT = np.ones((3, 3), dtype=bool)
_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class ExtractionConfig:
    """Box-extraction knobs; defaults follow the shipped pipeline."""

    threshold: float | str = "otsu"  # "otsu" or a fixed value in (0, 1)
    min_region_area_fraction: float = 0.005
    marker_min_distance_fraction: float = 0.125
    normalize: bool = True

    def __post_init__(self):
        if isinstance(self.threshold, str):
            if self.threshold != "otsu":
                raise ValidationError(f"unknown threshold mode {self.threshold!r}")
        elif not 0.0 < float(self.threshold) < 1.0:
            raise ValidationError(f"fixed threshold {self.threshold} outside (0, 1)")
        for name in ("min_region_area_fraction", "marker_min_distance_fraction"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValidationError(f"{name} {value} outside (0, 1)")


@dataclass(eq=False)
class BinaryMask:
    """Boolean foreground plus the threshold that produced it."""

    mask: np.ndarray = field(repr=False)
    threshold: float = 0.0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValidationError("binary mask must be 2-dimensional")


@dataclass(eq=False)
class RegionLabeling:
    """Per-pixel region ids, 0 = background, regions numbered 1..count."""

    labels: np.ndarray = field(repr=False)
    count: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.labels.ndim != 2:
            raise ValidationError("region labeling must be 2-dimensional")

    def validate_against(self, mask: BinaryMask):
        """Check the partition contract: ids contiguous, cover = foreground."""
        if self.labels.shape != mask.mask.shape:
            raise ValidationError("labeling dims differ from mask dims")
        present = np.unique(self.labels)
        expected = np.arange(self.count + 1) if self.count else np.array([0])
        covered = self.labels > 0
        if not np.array_equal(np.union1d(present, [0]), expected):
            raise ValidationError(f"region ids not contiguous 1..{self.count}: {present}")
        if not np.array_equal(covered, mask.mask):
            raise ValidationError("labeled pixels do not equal the foreground")


def normalize_map(m: LabelMap) -> LabelMap:
    """Min-max rescale to [0, 1]; constant maps pass through unchanged."""
    lo = float(m.values.min())
    hi = float(m.values.max())
    if hi == lo:
        return LabelMap(label=m.label, image_id=m.image_id, values=m.values.copy())
    values = (m.values - lo) / (hi - lo)
    return LabelMap(label=m.label, image_id=m.image_id, values=np.clip(values, 0.0, 1.0))


def otsu_threshold(m: LabelMap | np.ndarray, bins: int = 256) -> float:
    """Bin-edge value maximizing between-class variance of the histogram.

    Ties break toward the lower threshold; a constant map returns its
    constant, so strict-``>`` binarization then yields empty foreground.
    """
    values = m.values if isinstance(m, LabelMap) else np.asarray(m, dtype=np.float64)
    flat = values.ravel()
    if flat.size == 0:
        raise ValidationError("cannot threshold an empty map")
    if flat.min() < 0 or flat.max() > 1:
        raise ValidationError("otsu_threshold expects values in [0, 1]")
    lo = float(flat.min())
    hi = float(flat.max())
    if lo == hi:
        return lo
    hist, edges = np.histogram(flat, bins=bins, range=(0.0, 1.0))
    weights = hist.astype(np.float64) / flat.size
    centers = np.arange(bins, dtype=np.float64)
    best_score = -1.0
    best_edge = float(edges[1])
    w0 = 0.0
    mass0 = 0.0
    total_mass = float((weights * centers).sum())
    for e in range(bins):
        # Candidate threshold at edges[e]: class 0 is bins [0, e).
        if e > 0:
            w0 += weights[e - 1]
            mass0 += weights[e - 1] * centers[e - 1]
        w1 = 1.0 - w0
        if w0 <= 0.0 or w1 <= 0.0:
            continue
        mu0 = mass0 / w0
        mu1 = (total_mass - mass0) / w1
        score = w0 * w1 * (mu0 - mu1) ** 2
        if score > best_score:
            best_score = score
            best_edge = float(edges[e])
    return best_edge


def binarize(m: LabelMap, threshold: float) -> BinaryMask:
    """Foreground = values strictly greater than the threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold {threshold} outside [0, 1]")
    return BinaryMask(mask=m.values > threshold, threshold=float(threshold))


def _marker_cells(edt: np.ndarray, fg: np.ndarray, min_distance: float) -> list[tuple[int, int]]:
    """Distance-transform local maxima, greedily thinned to min separation.

    Every 8-connected foreground component keeps at least one marker, so
    flooding always covers the whole mask.
    """
    local_max = (edt == ndimage.maximum_filter(edt, size=3, mode="constant", cval=0.0)) & fg
    rows, cols = np.nonzero(local_max)
    order = sorted(range(len(rows)), key=lambda i: (-edt[rows[i], cols[i]], rows[i], cols[i]))
    candidates = [(int(rows[i]), int(cols[i])) for i in order]

    min_sq = min_distance * min_distance
    accepted: list[tuple[int, int]] = []
    for r, c in candidates:
        if all((r - ar) ** 2 + (c - ac) ** 2 >= min_sq for ar, ac in accepted):
            accepted.append((r, c))

    components, n_components = ndimage.label(fg, structure=_EIGHT)
    covered = {components[r, c] for r, c in accepted}
    for comp in range(1, n_components + 1):
        if comp in covered:
            continue
        for r, c in candidates:
            if components[r, c] == comp:
                accepted.append((r, c))
                break
    return accepted


def watershed_regions(m: LabelMap, mask: BinaryMask, config: ExtractionConfig) -> RegionLabeling:
    """Flood the negated distance transform of the foreground from markers."""
    if m.values.shape != mask.mask.shape:
        raise ValidationError("mask dims differ from map dims")
    fg = mask.mask
    h, w = fg.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if not fg.any():
        return RegionLabeling(labels=labels, count=0)

    edt = ndimage.distance_transform_edt(fg)
    min_distance = config.marker_min_distance_fraction * max(h, w)
    markers = _marker_cells(edt, fg, min_distance)

    heap: list[tuple[float, int, int, int, int]] = []
    seq = 0
    for rid, (r, c) in enumerate(markers, start=1):
        heapq.heappush(heap, (-edt[r, c], seq, r, c, rid))
        seq += 1
    while heap:
        _, _, r, c, rid = heapq.heappop(heap)
        if labels[r, c]:
            continue
        labels[r, c] = rid
        for dr, dc in _NEIGHBORS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and fg[nr, nc] and not labels[nr, nc]:
                heapq.heappush(heap, (-edt[nr, nc], seq, nr, nc, rid))
                seq += 1
    return RegionLabeling(labels=labels, count=len(markers))


def _region_extents(labeling: RegionLabeling) -> list[tuple[int, int, int, int, int, int]]:
    """Per region: (id, area, r0, r1, c0, c1) with inclusive cell bounds."""
    extents = []
    for rid in range(1, labeling.count + 1):
        rows, cols = np.nonzero(labeling.labels == rid)
        if rows.size == 0:
            continue
        extents.append(
            (rid, int(rows.size), int(rows.min()), int(rows.max()), int(cols.min()), int(cols.max()))
        )
    return extents


def regions_to_boxes(
    labeling: RegionLabeling,
    grid_size: tuple[int, int],
    image_size: tuple[int, int],
    min_region_area_fraction: float = 0.005,
) -> list[Box]:
    """Tight pixel-space box per region, small regions discarded.

    ``image_size`` is (width, height); cell (r, c) covers the pixel
    rectangle [c*sx, (c+1)*sx] x [r*sy, (r+1)*sy].  Output is ordered by
    descending region area (ties by region id).
    """
    grid_h, grid_w = grid_size
    if (grid_h, grid_w) != labeling.labels.shape:
        raise ValidationError("grid dims differ from labeling dims")
    width, height = image_size
    if width <= 0 or height <= 0:
        raise ValidationError("image dimensions must be positive")
    scale_x = width / grid_w
    scale_y = height / grid_h
    min_area = min_region_area_fraction * grid_h * grid_w
    boxes = []
    for rid, area, r0, r1, c0, c1 in _region_extents(labeling):
        if area < min_area:
            continue
        box = Box(c0 * scale_x, r0 * scale_y, (c1 + 1) * scale_x, (r1 + 1) * scale_y)
        boxes.append((area, rid, box))
    boxes.sort(key=lambda item: (-item[0], item[1]))
    return [box for _, _, box in boxes]


def extract_boxes(
    m: LabelMap,
    image_size: tuple[int, int],
    config: ExtractionConfig = ExtractionConfig(),
) -> list[tuple[Box, float]]:
    """Full map-to-boxes pipeline; returns (box, saliency) pairs.

    Saliency is the mean of the input map inside the box's grid footprint.
    An empty foreground yields an empty list.
    """
    work = normalize_map(m) if config.normalize else m
    if isinstance(config.threshold, str):
        threshold = otsu_threshold(work)
    else:
        threshold = float(config.threshold)
    mask = binarize(work, threshold)
    labeling = watershed_regions(work, mask, config)

    grid_h, grid_w = m.values.shape
    width, height = image_size
    if width <= 0 or height <= 0:
        raise ValidationError("image dimensions must be positive")
    scale_x = width / grid_w
    scale_y = height / grid_h
    min_area = config.min_region_area_fraction * grid_h * grid_w
    results = []
    for rid, area, r0, r1, c0, c1 in _region_extents(labeling):
        if area < min_area:
            continue
        box = Box(c0 * scale_x, r0 * scale_y, (c1 + 1) * scale_x, (r1 + 1) * scale_y)
        saliency = float(m.values[r0 : r1 + 1, c0 : c1 + 1].mean())
        results.append((area, rid, box, saliency))
    results.sort(key=lambda item: (-item[0], item[1]))
    return [(box, saliency) for _, _, box, saliency in results]
