"""Nodule candidate ingestion, filtering, deduplication, and a blob detector.

Candidates travel as world-mm records compatible with the LUNA16 CSV layout:
"seriesuid,coordX,coordY,coordZ,diameter_mm,probability". Annotations use the
same layout without the probability column.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

from .detection_geometry import Box3, ScoredBox, nms
from .errors import FormatError, ValidationError
from .volume_io import CtVolume

CANDIDATE_HEADER = ("seriesuid", "coordX", "coordY", "coordZ", "diameter_mm", "probability")
ANNOTATION_HEADER = ("seriesuid", "coordX", "coordY", "coordZ", "diameter_mm")
DEFAULT_DIAMETER_MM = 5.0
DEFAULT_SCORE_THRESHOLD = 0.1


@dataclass(frozen=True)
class NoduleCandidate:
    """Detector output: world-mm cube center, diameter, and confidence."""

    scan_id: str
    center_mm: tuple[float, float, float]
    diameter_mm: float
    score: float

    def __post_init__(self):
        if self.diameter_mm <= 0:
            raise ValidationError(f"diameter must be positive, got {self.diameter_mm}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruthNodule:
    """Annotated nodule location and diameter in world mm."""

    scan_id: str
    center_mm: tuple[float, float, float]
    diameter_mm: float

    def __post_init__(self):
        if self.diameter_mm <= 0:
            raise ValidationError(f"diameter must be positive, got {self.diameter_mm}")


def _parse_float(value: str, row_num: int, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise FormatError(
            f"row {row_num}: non-numeric {column} value {value!r}"
        ) from None


def load_candidates_csv(text: str) -> list[NoduleCandidate]:
    """Parse a candidates CSV; row order is preserved.

    The diameter column may be absent (the stock LUNA16 candidates file lacks
    it), in which case a 5.0 mm default is applied with a warning.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty candidates CSV (missing header row)") from None
    header = tuple(h.strip() for h in header)
    if header == CANDIDATE_HEADER:
        has_diameter = True
    elif header == CANDIDATE_HEADER[:4] + CANDIDATE_HEADER[5:]:
        has_diameter = False
        warnings.warn(
            f"candidates CSV has no diameter_mm column; defaulting to {DEFAULT_DIAMETER_MM} mm",
            stacklevel=2,
        )
    else:
        raise FormatError(
            f"unexpected candidates header {','.join(header)!r}; "
            f"expected {','.join(CANDIDATE_HEADER)!r}"
        )

    out = []
    expected_len = len(CANDIDATE_HEADER) if has_diameter else len(CANDIDATE_HEADER) - 1
    for row_num, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != expected_len:
            raise FormatError(f"row {row_num}: expected {expected_len} fields, got {len(row)}")
        x = _parse_float(row[1], row_num, "coordX")
        y = _parse_float(row[2], row_num, "coordY")
        z = _parse_float(row[3], row_num, "coordZ")
        if has_diameter:
            diameter = _parse_float(row[4], row_num, "diameter_mm")
            score = _parse_float(row[5], row_num, "probability")
        else:
            diameter = DEFAULT_DIAMETER_MM
            score = _parse_float(row[4], row_num, "probability")
        if not 0.0 <= score <= 1.0:
            raise ValidationError(f"row {row_num}: probability {score} outside [0, 1]")
        out.append(NoduleCandidate(row[0], (x, y, z), diameter, score))
    return out


def write_candidates_csv(candidates: Iterable[NoduleCandidate]) -> str:
    lines = [",".join(CANDIDATE_HEADER)]
    for c in candidates:
        x, y, z = c.center_mm
        lines.append(f"{c.scan_id},{x!r},{y!r},{z!r},{c.diameter_mm!r},{c.score!r}")
    return "\n".join(lines) + "\n"


def load_annotations_csv(text: str) -> list[GroundTruthNodule]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise FormatError("empty annotations CSV (missing header row)") from None
    if tuple(h.strip() for h in header) != ANNOTATION_HEADER:
        raise FormatError(
            f"unexpected annotations header {','.join(header)!r}; "
            f"expected {','.join(ANNOTATION_HEADER)!r}"
        )
    out = []
    for row_num, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(ANNOTATION_HEADER):
            raise FormatError(
                f"row {row_num}: expected {len(ANNOTATION_HEADER)} fields, got {len(row)}"
            )
        x = _parse_float(row[1], row_num, "coordX")
        y = _parse_float(row[2], row_num, "coordY")
        z = _parse_float(row[3], row_num, "coordZ")
        diameter = _parse_float(row[4], row_num, "diameter_mm")
        out.append(GroundTruthNodule(row[0], (x, y, z), diameter))
    return out


def write_annotations_csv(nodules: Iterable[GroundTruthNodule]) -> str:
    lines = [",".join(ANNOTATION_HEADER)]
    for n in nodules:
        x, y, z = n.center_mm
        lines.append(f"{n.scan_id},{x!r},{y!r},{z!r},{n.diameter_mm!r}")
    return "\n".join(lines) + "\n"


def threshold_candidates(
    candidates: list[NoduleCandidate], min_score: float = DEFAULT_SCORE_THRESHOLD
) -> list[NoduleCandidate]:
    """Keep candidates whose score is strictly greater than min_score."""
    return [c for c in candidates if c.score > min_score]


def dedup_candidates(
    candidates: list[NoduleCandidate],
    volumes: Mapping[str, CtVolume],
    iou_threshold: float = 0.1,
) -> list[NoduleCandidate]:
    """Suppress multiple detections of one nodule via cube NMS in voxel space.

    Candidates are converted to voxel-frame cubes using each scan's geometry
    (side = diameter / mean spacing), NMS'd per scan, and returned sorted by
    descending score. Idempotent.
    """
    by_scan: dict[str, list[tuple[int, NoduleCandidate]]] = {}
    for idx, cand in enumerate(candidates):
        by_scan.setdefault(cand.scan_id, []).append((idx, cand))

    survivors: list[NoduleCandidate] = []
    for scan_id, group in by_scan.items():
        volume = volumes.get(scan_id)
        if volume is None:
            raise ValidationError(f"no volume geometry for scan {scan_id!r}")
        mean_spacing = sum(volume.spacing) / 3.0
        boxes = []
        owner = {}
        for idx, cand in group:
            sb = ScoredBox(
                box=Box3(
                    center=volume.world_to_voxel(cand.center_mm),
                    side=cand.diameter_mm / mean_spacing,
                ),
                score=cand.score,
                scan_id=scan_id,
            )
            boxes.append(sb)
            owner[id(sb)] = cand
        survivors.extend(owner[id(sb)] for sb in nms(boxes, iou_threshold))
    survivors.sort(key=lambda c: (-c.score, c.scan_id, c.center_mm))
    return survivors


def detect_blobs(
    volume: CtVolume,
    intensity_threshold: float,
    min_diameter_mm: float,
    max_diameter_mm: float,
    scan_id: str = "",
) -> list[NoduleCandidate]:
    """Bright-blob candidate source for phantom and smoke-test volumes.

    Thresholds the volume, takes 6-connected 3D components, and emits one
    candidate per component: centroid in world mm, equivalent-sphere diameter
    from the component volume, and score = mean component intensity / max
    volume intensity clamped to [0, 1]. Components outside the diameter band
    are dropped.
    """
    if min_diameter_mm >= max_diameter_mm:
        raise ValidationError(
            f"diameter band is empty: [{min_diameter_mm}, {max_diameter_mm}]"
        )
    mask = volume.voxels > intensity_threshold
    if not mask.any():
        return []
    labeled, count = ndimage.label(mask)  # default structure is 6-connected
    voxel_mm3 = float(np.prod(volume.spacing))
    max_intensity = float(volume.voxels.max())
    out = []
    centroids = ndimage.center_of_mass(mask, labeled, range(1, count + 1))
    sums = ndimage.sum_labels(volume.voxels.astype(np.float64), labeled, range(1, count + 1))
    sizes = ndimage.sum_labels(mask, labeled, range(1, count + 1))
    for (cz, cy, cx), total, size in zip(centroids, sums, sizes):
        size = int(size)
        diameter = (6.0 * size * voxel_mm3 / np.pi) ** (1.0 / 3.0)
        if not min_diameter_mm <= diameter <= max_diameter_mm:
            continue
        mean_intensity = total / size
        score = float(np.clip(mean_intensity / max_intensity, 0.0, 1.0)) if max_intensity else 0.0
        center = volume.voxel_to_world((cx, cy, cz))
        out.append(NoduleCandidate(scan_id, center, diameter, score))
    return out
