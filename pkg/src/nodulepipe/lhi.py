"""Location history images: per-pixel change-recency maps over a slice window.

Each pixel holds a decay counter: it is reset to the ceiling ``tau`` whenever
the intensity at that position changes by more than ``delta_threshold``
between consecutive slices, and otherwise decays by 1 per slice toward 0.
Candidates whose appearance balloons or shrinks through slices leave
concentric high-counter regions; drifting tissue leaves directional streaks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .candidate_pipeline import NoduleCandidate
from .errors import ValidationError
from .volume_io import HU_AIR, CtVolume

DEFAULT_TAU = 10
DEFAULT_DELTA_HU = 30.0
DEFAULT_WINDOW_SLICES = 11
DEFAULT_PATCH_SCALE = 2.0
DEFAULT_OUT_SIZE = 48


@dataclass(frozen=True)
class LhiParams:
    """Knobs of the history computation and patch geometry.

    tau: decay ceiling in slices.
    delta_threshold: HU difference that counts as a change.
    window_slices: odd number of consecutive slices fed to the recurrence.
    patch_scale: in-plane crop side as a multiple of the candidate diameter.
    out_size: final square image side after resizing.
    """

    tau: int = DEFAULT_TAU
    delta_threshold: float = DEFAULT_DELTA_HU
    window_slices: int = DEFAULT_WINDOW_SLICES
    patch_scale: float = DEFAULT_PATCH_SCALE
    out_size: int = DEFAULT_OUT_SIZE

    def __post_init__(self):
        if self.tau < 1:
            raise ValidationError(f"tau must be >= 1, got {self.tau}")
        if self.delta_threshold <= 0:
            raise ValidationError(f"delta_threshold must be positive, got {self.delta_threshold}")
        if self.window_slices < 1 or self.window_slices % 2 == 0:
            raise ValidationError(f"window_slices must be odd and positive, got {self.window_slices}")
        if self.patch_scale < 1.0:
            raise ValidationError(f"patch_scale must be >= 1, got {self.patch_scale}")
        if self.out_size < 1:
            raise ValidationError(f"out_size must be >= 1, got {self.out_size}")


@dataclass(frozen=True)
class LocationHistoryImage:
    """Resized history grid for one candidate, plus where it came from."""

    values: np.ndarray  # float32, out_size x out_size, in [0, tau]
    tau: int
    provenance: str
    slice_range: tuple[int, int]

    def normalized(self) -> np.ndarray:
        """Values scaled to [0, 1] for classifier input."""
        return (self.values / float(self.tau)).astype(np.float32)


def _as_stack(stack) -> np.ndarray:
    try:
        arr = np.asarray(stack)
    except ValueError as exc:
        raise ValidationError(f"slices disagree in shape: {exc}") from exc
    if arr.ndim != 3 or arr.dtype == object:
        raise ValidationError("slice stack must be a uniform (slices, h, w) array")
    return arr


def psi(stack, x: int, y: int, s: int, delta_threshold: float) -> int:
    """Change indicator at pixel (x, y) between slice s and its predecessor.

    1 iff |I(x,y,s) - I(x,y,s-1)| is strictly greater than the threshold;
    0 at s = 0, which has no predecessor.
    """
    arr = _as_stack(stack)
    if s == 0:
        return 0
    diff = abs(float(arr[s, y, x]) - float(arr[s - 1, y, x]))
    return 1 if diff > delta_threshold else 0


def compute_lhi(stack, params: LhiParams) -> np.ndarray:
    """Run the decay recurrence across a slice stack; return the final grid.

    The counter starts at 0 on the first slice. For each subsequent slice it
    is set to tau wherever the change indicator fires and decremented toward
    0 (never below) elsewhere. Integer arithmetic throughout.
    """
    arr = _as_stack(stack).astype(np.float64)
    if arr.shape[0] != params.window_slices:
        raise ValidationError(
            f"stack has {arr.shape[0]} slices, expected window_slices={params.window_slices}"
        )
    f = np.zeros(arr.shape[1:], dtype=np.int32)
    for s in range(1, arr.shape[0]):
        changed = np.abs(arr[s] - arr[s - 1]) > params.delta_threshold
        f = np.where(changed, params.tau, np.maximum(f - 1, 0)).astype(np.int32)
    return f


def _candidate_voxel_center(volume: CtVolume, candidate: NoduleCandidate):
    vx, vy, vz = volume.world_to_voxel(candidate.center_mm)
    ix, iy, iz = int(round(vx)), int(round(vy)), int(round(vz))
    nx, ny, nz = volume.dims
    if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
        raise ValidationError(
            f"candidate center {candidate.center_mm} maps to voxel ({vx:.1f}, {vy:.1f}, {vz:.1f}) "
            f"outside dims {volume.dims}"
        )
    return ix, iy, iz


def candidate_diameter_voxels(volume: CtVolume, candidate: NoduleCandidate) -> int:
    """Candidate diameter in in-plane voxels (mean x/y spacing, rounded up)."""
    inplane = (volume.spacing[0] + volume.spacing[1]) / 2.0
    return max(1, int(np.ceil(candidate.diameter_mm / inplane)))


def extract_patch_stack(
    volume: CtVolume, candidate: NoduleCandidate, params: LhiParams
) -> np.ndarray:
    """Crop the candidate-centered slice window used by the recurrence.

    Takes window_slices consecutive slices centered on the candidate's slice
    (edge slices replicated near volume ends) and, on each, an in-plane
    square of side patch_scale x candidate diameter. In-plane regions outside
    the volume are padded with air (-1000 HU).
    """
    ix, iy, iz = _candidate_voxel_center(volume, candidate)
    side = max(1, int(round(params.patch_scale * candidate_diameter_voxels(volume, candidate))))
    half = params.window_slices // 2
    nx, ny, nz = volume.dims

    x0 = ix - side // 2
    y0 = iy - side // 2
    out = np.full((params.window_slices, side, side), HU_AIR, dtype=np.int16)

    sx0, sx1 = max(0, x0), min(nx, x0 + side)
    sy0, sy1 = max(0, y0), min(ny, y0 + side)
    if sx0 < sx1 and sy0 < sy1:
        for k in range(params.window_slices):
            z = int(np.clip(iz - half + k, 0, nz - 1))
            out[k, sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = volume.voxels[z, sy0:sy1, sx0:sx1]
    return out


def resize_bilinear(image: np.ndarray, out_size: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D grid to out_size x out_size."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    rows = np.linspace(0.0, h - 1.0, out_size) if out_size > 1 else np.array([(h - 1) / 2.0])
    cols = np.linspace(0.0, w - 1.0, out_size) if out_size > 1 else np.array([(w - 1) / 2.0])
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return map_coordinates(img, [rr, cc], order=1, mode="nearest")


def lhi_for_candidate(
    volume: CtVolume, candidate: NoduleCandidate, params: LhiParams
) -> LocationHistoryImage:
    """Full per-candidate path: crop window, run recurrence, resize, clamp."""
    stack = extract_patch_stack(volume, candidate, params)
    raw = compute_lhi(stack, params)
    resized = np.clip(resize_bilinear(raw, params.out_size), 0.0, float(params.tau))
    _, _, iz = _candidate_voxel_center(volume, candidate)
    half = params.window_slices // 2
    x, y, z = candidate.center_mm
    return LocationHistoryImage(
        values=resized.astype(np.float32),
        tau=params.tau,
        provenance=f"{candidate.scan_id}@({x:.2f},{y:.2f},{z:.2f})",
        slice_range=(iz - half, iz + half),
    )


def elongation(values: np.ndarray, threshold: float) -> float:
    """Eigenvalue ratio of the second-moment matrix of the above-threshold region.

    Near 1 for isotropic (ring/disk) regions, large for streaks. Returns inf
    when the region is degenerate (collinear or fewer than 2 pixels).
    """
    ys, xs = np.nonzero(np.asarray(values) > threshold)
    if len(xs) < 2:
        return float("inf")
    coords = np.stack([xs, ys]).astype(np.float64)
    cov = np.cov(coords)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals[0] <= 1e-12:
        return float("inf")
    return float(eigvals[1] / eigvals[0])
