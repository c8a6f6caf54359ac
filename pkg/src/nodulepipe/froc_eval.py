"""Scoring candidate sets against ground truth: hit matching, FROC, CPM.

The hit rule is the LUNA16 one: a candidate hits a nodule when the distance
between centers is at most the nodule radius. Candidates are processed in
descending score (ties broken by lexicographic center); the first hit on a
nodule is the counted true positive, later hits are duplicates and count
neither way, and non-hitting candidates are false positives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .candidate_pipeline import GroundTruthNodule, NoduleCandidate
from .errors import ValidationError

FP_LEVELS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
CURVE_READING = "stepwise"  # level sensitivity = best operating point at or below the level

TP = "tp"
FP = "fp"
DUPLICATE = "duplicate"


@dataclass(frozen=True)
class MatchResult:
    """Per-candidate and per-nodule outcome of one matching pass.

    candidate_flags aligns with the candidate input order; gt_detected aligns
    with the ground-truth input order.
    """

    candidate_flags: tuple[str, ...]
    gt_detected: tuple[bool, ...]

    @property
    def tp_count(self) -> int:
        return sum(self.gt_detected)

    @property
    def fp_count(self) -> int:
        return sum(1 for f in self.candidate_flags if f == FP)

    @property
    def duplicate_count(self) -> int:
        return sum(1 for f in self.candidate_flags if f == DUPLICATE)


@dataclass(frozen=True)
class FrocReport:
    """FROC operating points plus sensitivities read at the standard FP levels."""

    operating_points: tuple[tuple[float, float, float], ...]  # (threshold, fps/scan, sensitivity)
    level_sensitivities: tuple[float, ...]
    cpm: float
    scan_count: int
    fp_levels: tuple[float, ...] = FP_LEVELS
    curve_reading: str = CURVE_READING


@dataclass(frozen=True)
class FpReductionReport:
    """Before/after comparison of a candidate-filtering step."""

    fp_before: int
    fp_after: int
    percent_reduction: float
    sensitivity_before: float
    sensitivity_after: float
    score_threshold: float


def _hits(candidate: NoduleCandidate, nodule: GroundTruthNodule) -> bool:
    if candidate.scan_id != nodule.scan_id:
        return False
    dist = math.dist(candidate.center_mm, nodule.center_mm)
    return dist <= nodule.diameter_mm / 2.0


def _processing_order(candidates: Sequence[NoduleCandidate]) -> list[int]:
    return sorted(
        range(len(candidates)),
        key=lambda i: (-candidates[i].score, candidates[i].center_mm, candidates[i].scan_id),
    )


def match_candidates(
    candidates: Sequence[NoduleCandidate], ground_truth: Sequence[GroundTruthNodule]
) -> MatchResult:
    """Assign each candidate a tp/fp/duplicate flag and each nodule a hit bit."""
    flags = [FP] * len(candidates)
    detected = [False] * len(ground_truth)
    for i in _processing_order(candidates):
        hit_any = False
        for j, nodule in enumerate(ground_truth):
            if _hits(candidates[i], nodule):
                hit_any = True
                if not detected[j]:
                    detected[j] = True
                    flags[i] = TP
                    break
        if hit_any and flags[i] != TP:
            flags[i] = DUPLICATE
    return MatchResult(candidate_flags=tuple(flags), gt_detected=tuple(detected))


def froc(
    candidates: Sequence[NoduleCandidate],
    ground_truth: Sequence[GroundTruthNodule],
    scan_count: int,
) -> FrocReport:
    """Sweep score thresholds (descending, one per distinct score) and read
    sensitivity at the standard FP/scan levels.

    At each threshold the operating set is every candidate scoring >= it.
    The sensitivity at level L is the best sensitivity among operating points
    with at most L FPs per scan, 0 if there is none; CPM is the mean over
    the seven levels.
    """
    if scan_count < 1:
        raise ValidationError(f"scan_count must be >= 1, got {scan_count}")
    if not ground_truth:
        raise ValidationError("sensitivity is undefined for empty ground truth")

    points = []
    for threshold in sorted({c.score for c in candidates}, reverse=True):
        subset = [c for c in candidates if c.score >= threshold]
        result = match_candidates(subset, ground_truth)
        sensitivity = result.tp_count / len(ground_truth)
        fps_per_scan = result.fp_count / scan_count
        points.append((threshold, fps_per_scan, sensitivity))

    levels = []
    for level in FP_LEVELS:
        eligible = [sens for _, fps, sens in points if fps <= level]
        levels.append(max(eligible) if eligible else 0.0)
    return FrocReport(
        operating_points=tuple(points),
        level_sensitivities=tuple(levels),
        cpm=cpm(levels),
        scan_count=scan_count,
    )


def cpm(level_sensitivities: Sequence[float]) -> float:
    """Arithmetic mean of the seven per-level sensitivities."""
    if len(level_sensitivities) != len(FP_LEVELS):
        raise ValidationError(
            f"expected {len(FP_LEVELS)} level sensitivities, got {len(level_sensitivities)}"
        )
    if any(not 0.0 <= s <= 1.0 for s in level_sensitivities):
        raise ValidationError(f"sensitivities must lie in [0, 1], got {level_sensitivities}")
    return sum(level_sensitivities) / len(level_sensitivities)


def cpm_consistency(
    level_sensitivities: Sequence[float], claimed_cpm: float, tolerance: float = 0.0005
) -> tuple[float, bool]:
    """Recompute a CPM from its levels and compare against a claimed value.

    Returns (computed, matches); useful for flagging rounding or transcription
    slips in published result tables.
    """
    computed = cpm(level_sensitivities)
    return computed, abs(computed - claimed_cpm) <= tolerance


def sensitivity_specificity(tp: int, fn: int, tn: int, fp: int) -> tuple[float, float]:
    """sensitivity = tp / (tp + fn), specificity = tn / (tn + fp)."""
    if tp + fn == 0:
        raise ValidationError("sensitivity undefined: tp + fn is zero")
    if tn + fp == 0:
        raise ValidationError("specificity undefined: tn + fp is zero")
    return tp / (tp + fn), tn / (tn + fp)


def fp_reduction_report(
    before: Sequence[NoduleCandidate],
    after: Sequence[NoduleCandidate],
    ground_truth: Sequence[GroundTruthNodule],
    score_threshold: float = 0.0,
) -> FpReductionReport:
    """Quantify what a filtering step removed.

    ``after`` must be a sub-multiset of ``before``. Counts FPs on both sides
    at the given score threshold (strictly greater), reports the percent
    reduction to one decimal (round half to even), and the sensitivity on
    both sides.
    """
    remaining = list(before)
    for cand in after:
        try:
            remaining.remove(cand)
        except ValueError:
            raise ValidationError(
                f"filtered set is not a subset of the input set (extra candidate {cand})"
            ) from None

    def stats(cands):
        kept = [c for c in cands if c.score > score_threshold]
        result = match_candidates(kept, ground_truth)
        sens = result.tp_count / len(ground_truth) if ground_truth else 0.0
        return result.fp_count, sens

    fp_before, sens_before = stats(before)
    fp_after, sens_after = stats(after)
    reduction = 0.0 if fp_before == 0 else round((1.0 - fp_after / fp_before) * 100.0, 1)
    return FpReductionReport(
        fp_before=fp_before,
        fp_after=fp_after,
        percent_reduction=reduction,
        sensitivity_before=sens_before,
        sensitivity_after=sens_after,
        score_threshold=score_threshold,
    )
