"""Aggregate an attention stack into one map per label.

Pipeline: resample every block to the finest grid present, average a
token's maps over all (timestep, block) pairs, then average the tokens of
a label's span and clamp to [0, 1].

Per-token averaging promotes to float64 and sums the (timestep, block)
addends in ascending value order.  Sorting makes the reduction canonical:
the result is bit-identical under any permutation of the blocks, not just
reproducible for a fixed order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio.types import AttentionStack
from .errors import ValidationError


@dataclass(eq=False)
class TokenMap:
    """Per-token attention averaged over timesteps and blocks."""

    token: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("token map must be 2-dimensional")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValidationError(f"token map {self.token}: values must be finite and >= 0")


@dataclass(eq=False)
class LabelMap:
    """Per-label attention on one grid, clamped to [0, 1]."""

    label: str
    image_id: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("label map must be 2-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"label map {self.label!r}: non-finite values")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValidationError(f"label map {self.label!r}: values outside [0, 1]")

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape


def _axis_coords(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(maps: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of (..., H, W) arrays with corner alignment.

    Written in lerp form (v0 + w*(v1-v0)) so constants are preserved
    exactly and output values never leave [input min, input max].
    """
    h_in, w_in = maps.shape[-2:]
    h_out, w_out = out_hw
    if (h_in, w_in) == (h_out, w_out):
        return maps
    arr = np.asarray(maps, dtype=np.float64)
    r_lo, r_hi, r_w = _axis_coords(h_in, h_out)
    c_lo, c_hi, c_w = _axis_coords(w_in, w_out)
    rows_lo = arr[..., r_lo, :]
    rows = rows_lo + r_w[:, None] * (arr[..., r_hi, :] - rows_lo)
    cols_lo = rows[..., :, c_lo]
    out = cols_lo + c_w * (rows[..., :, c_hi] - cols_lo)
    return out.astype(maps.dtype, copy=False)


def align_maps(stack: AttentionStack) -> AttentionStack:
    """Resample every block to the largest grid present in the stack.

    Blocks already at the target size pass through unchanged.
    """
    grids = stack.grids
    target = (max(h for h, _ in grids), max(w for _, w in grids))
    if all(g == target for g in grids):
        return stack
    data = tuple(
        tuple(bilinear_resize(blk, target) for blk in row)
        for row in stack.data
    )
    return AttentionStack(image_id=stack.image_id, label_spans=dict(stack.label_spans), data=data)


def _require_aligned(stack: AttentionStack):
    grids = set(stack.grids)
    if len(grids) != 1:
        raise ValidationError(
            f"stack {stack.image_id}: blocks are on mixed grids {sorted(grids)}; "
            "call align_maps first"
        )


def average_token_maps(stack: AttentionStack, token: int) -> TokenMap:
    """Mean of one token's maps over every (timestep, block) pair."""
    _require_aligned(stack)
    if not 0 <= token < stack.T:
        raise ValidationError(
            f"stack {stack.image_id}: token {token} out of range [0, {stack.T})"
        )
    stacked = np.stack(
        [blk[token] for row in stack.data for blk in row]
    ).astype(np.float64)
    # Canonical (value-ordered) summation: exact under block permutation.
    stacked.sort(axis=0)
    total = stacked.sum(axis=0)
    return TokenMap(token=token, values=total / (stack.J * stack.K))


def label_map(stack: AttentionStack, label: str) -> LabelMap:
    """Mean of a label's token maps, clamped to [0, 1]."""
    _require_aligned(stack)
    span = stack.label_spans.get(label)
    if span is None:
        raise ValidationError(f"stack {stack.image_id}: no span for label {label!r}")
    acc = average_token_maps(stack, span[0]).values.copy()
    for token in span[1:]:
        acc += average_token_maps(stack, token).values
    acc /= len(span)
    return LabelMap(label=label, image_id=stack.image_id, values=np.clip(acc, 0.0, 1.0))
