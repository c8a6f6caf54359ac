"""Cube boxes, IoU, greedy NMS, anchor grids, window tiling, and sample labels.

All boxes are axis-aligned cubes parameterized as center + side, matching the
detector's (x, y, z, d) output. Functions are pure and order-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import ValidationError

DEFAULT_ANCHOR_SIDES = (3.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
NEGATIVE_IOU_MAX = 0.02
POSITIVE_IOU_MIN = 0.4
DEFAULT_NMS_IOU = 0.1
DEFAULT_WINDOW = 96
DEFAULT_MIN_OVERLAP = 32


@dataclass(frozen=True)
class Box3:
    """Axis-aligned cube: center (x, y, z) and edge length, in one frame."""

    center: tuple[float, float, float]
    side: float
    frame: str = "voxel"

    def __post_init__(self):
        if self.side <= 0:
            raise ValidationError(f"box side must be positive, got {self.side}")
        if len(self.center) != 3:
            raise ValidationError(f"box center must have 3 components, got {self.center}")

    @property
    def volume(self) -> float:
        return self.side ** 3

    def bounds(self, axis: int) -> tuple[float, float]:
        half = self.side / 2.0
        return self.center[axis] - half, self.center[axis] + half


@dataclass(frozen=True)
class ScoredBox:
    """A cube box with a detector confidence and owning scan."""

    box: Box3
    score: float
    scan_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class AnchorSet:
    """Cube side lengths (voxels), strictly increasing."""

    sides: tuple[float, ...] = DEFAULT_ANCHOR_SIDES

    def __post_init__(self):
        if not self.sides or any(s <= 0 for s in self.sides):
            raise ValidationError(f"anchor sides must be positive, got {self.sides}")
        if any(a >= b for a, b in zip(self.sides, self.sides[1:])):
            raise ValidationError(f"anchor sides must be strictly increasing, got {self.sides}")


class SampleLabel(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORED = "ignored"


def iou3(a: Box3, b: Box3) -> float:
    """Intersection-over-union of two axis-aligned cubes in the same frame."""
    if a.frame != b.frame:
        raise ValidationError(f"IoU requires one frame, got {a.frame!r} vs {b.frame!r}")
    inter = 1.0
    for axis in range(3):
        a_lo, a_hi = a.bounds(axis)
        b_lo, b_hi = b.bounds(axis)
        # cap at the sides so rounding in the bounds can never push the
        # intersection past either cube (keeps IoU(a, a) exactly 1)
        overlap = min(a_hi - b_lo, b_hi - a_lo, a.side, b.side)
        if overlap <= 0:
            return 0.0
        inter *= overlap
    union = a.volume + b.volume - inter
    return inter / union


def _nms_order_key(sb: ScoredBox):
    # descending score; ties broken toward the lower (z, y, x) center
    cx, cy, cz = sb.box.center
    return (-sb.score, cz, cy, cx)


def nms(candidates: list[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression.

    Keeps the highest-scoring box, drops every box whose IoU with a kept box
    exceeds the threshold, and repeats. Output is sorted by descending score.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValidationError(f"IoU threshold must lie in [0, 1], got {iou_threshold}")
    pending = sorted(candidates, key=_nms_order_key)
    kept: list[ScoredBox] = []
    for cand in pending:
        if all(iou3(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def assign_samples(
    boxes: list[Box3],
    ground_truth: list[Box3],
    negative_max: float = NEGATIVE_IOU_MAX,
    positive_min: float = POSITIVE_IOU_MIN,
) -> list[SampleLabel]:
    """Label each box by its best IoU against ground truth.

    Below negative_max -> NEGATIVE, above positive_min -> POSITIVE, the band
    in between -> IGNORED (kept out of training to avoid ambiguous samples).
    """
    labels = []
    for box in boxes:
        best = max((iou3(box, gt) for gt in ground_truth), default=0.0)
        if best < negative_max:
            labels.append(SampleLabel.NEGATIVE)
        elif best > positive_min:
            labels.append(SampleLabel.POSITIVE)
        else:
            labels.append(SampleLabel.IGNORED)
    return labels


def tile_volume(
    dims: tuple[int, int, int],
    window: int = DEFAULT_WINDOW,
    min_overlap: int = DEFAULT_MIN_OVERLAP,
    pad: bool = False,
) -> list[tuple[int, int, int]]:
    """Sliding-window origins covering a dims-sized grid with cubic windows.

    Origins advance by (window - min_overlap) per axis with the last window
    clamped flush to the volume end, so every voxel is inside at least one
    window. An axis shorter than the window is an error unless pad is set,
    in which case a single origin-0 window (extending past the edge) is used
    and the caller is expected to pad.
    """
    if window < 1:
        raise ValidationError(f"window must be >= 1, got {window}")
    if not 0 <= min_overlap < window:
        raise ValidationError(f"min_overlap must lie in [0, window), got {min_overlap}")
    stride = window - min_overlap
    per_axis: list[list[int]] = []
    for dim in dims:
        if dim < window:
            if not pad:
                raise ValidationError(
                    f"axis of size {dim} is smaller than window {window} and padding is disabled"
                )
            per_axis.append([0])
            continue
        stops = list(range(0, dim - window + 1, stride))
        if stops[-1] != dim - window:
            stops.append(dim - window)
        per_axis.append(stops)
    return [(x, y, z) for z in per_axis[2] for y in per_axis[1] for x in per_axis[0]]


def generate_anchors(
    anchor_set: AnchorSet,
    feature_stride: int,
    dims: tuple[int, int, int],
) -> list[Box3]:
    """One anchor per side per stride-spaced grid cell, centered in the cell."""
    if feature_stride < 1:
        raise ValidationError(f"feature stride must be >= 1, got {feature_stride}")
    counts = [d // feature_stride for d in dims]
    anchors = []
    for iz in range(counts[2]):
        for iy in range(counts[1]):
            for ix in range(counts[0]):
                center = (
                    (ix + 0.5) * feature_stride,
                    (iy + 0.5) * feature_stride,
                    (iz + 0.5) * feature_stride,
                )
                for side in anchor_set.sides:
                    anchors.append(Box3(center=center, side=side))
    return anchors
