"""Deterministic synthetic CT volumes with exact ground truth.

Two object families mirror the patterns the slice-history filter has to
separate: "spheres" whose in-plane radius grows or shrinks linearly across
slices (nodule stand-ins, concentric history patterns) and "tubes" whose
constant-radius cross-section drifts across slices (vessel-like tissue,
streak history patterns).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .candidate_pipeline import GroundTruthNodule, NoduleCandidate
from .errors import FormatError, ValidationError
from .lhi import LhiParams, lhi_for_candidate
from .volume_io import CtVolume

HU_CLAMP = (-1024, 3071)
DEFAULT_BACKGROUND_HU = -900
DEFAULT_NOISE_SIGMA = 20.0
DEFAULT_SPHERE_STEP_VOX = 0.8
DEFAULT_TUBE_DRIFT_VOX = 1.5
MIN_NODULE_MM = 3.0
MAX_NODULE_MM = 30.0


@dataclass(frozen=True)
class SphereSpec:
    """Nodule stand-in: in-plane radius changes linearly with slice offset.

    shrinking: widest at the center slice, tapering to nothing outward.
    expanding: a point at the center slice, widening to max_diameter outward.
    """

    center_mm: tuple[float, float, float]
    max_diameter_mm: float
    growth: str = "shrinking"
    intensity_hu: int = 60
    radius_step_vox: float = DEFAULT_SPHERE_STEP_VOX

    def __post_init__(self):
        if self.growth not in ("shrinking", "expanding"):
            raise ValidationError(f"growth must be shrinking or expanding, got {self.growth!r}")
        if not MIN_NODULE_MM <= self.max_diameter_mm <= MAX_NODULE_MM:
            raise ValidationError(
                f"sphere diameter {self.max_diameter_mm} outside [{MIN_NODULE_MM}, {MAX_NODULE_MM}] mm"
            )
        if self.radius_step_vox <= 0:
            raise ValidationError(f"radius step must be positive, got {self.radius_step_vox}")


@dataclass(frozen=True)
class TubeSpec:
    """Tissue stand-in: constant-radius disk drifting along an oblique line."""

    center_mm: tuple[float, float, float]
    radius_mm: float
    direction: tuple[float, float, float] = (1.5, 0.0, 1.0)
    span_slices: int = 15
    intensity_hu: int = 60

    def __post_init__(self):
        if self.radius_mm <= 0:
            raise ValidationError(f"tube radius must be positive, got {self.radius_mm}")
        if abs(self.direction[2]) < 1e-9:
            raise ValidationError("tube direction must be oblique to the slice plane (dz != 0)")
        if self.span_slices < 1:
            raise ValidationError(f"span_slices must be >= 1, got {self.span_slices}")


@dataclass(frozen=True)
class PhantomSpec:
    """Full description of one synthetic scan; generation is pure in (spec, seed)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_hu: int = DEFAULT_BACKGROUND_HU
    noise_sigma_hu: float = DEFAULT_NOISE_SIGMA
    objects: tuple = ()
    seed: int = 0
    scan_id: str = "phantom"

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise ValidationError(f"dims must be positive, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be positive, got {self.spacing}")
        if self.noise_sigma_hu < 0:
            raise ValidationError(f"noise sigma must be >= 0, got {self.noise_sigma_hu}")


def _sphere_profile(sphere: SphereSpec, spacing) -> list[tuple[int, float]]:
    """(slice offset, in-plane radius mm) pairs where the sphere is visible."""
    inplane = (spacing[0] + spacing[1]) / 2.0
    step_mm = sphere.radius_step_vox * inplane
    r_max = sphere.max_diameter_mm / 2.0
    r_min = inplane / 2.0
    n_half = int(math.floor((r_max - r_min) / step_mm)) if r_max > r_min else 0
    profile = []
    for dz in range(-n_half, n_half + 1):
        if sphere.growth == "shrinking":
            r = r_max - step_mm * abs(dz)
        else:
            r = min(r_max, r_min + step_mm * abs(dz))
        if r > 0:
            profile.append((dz, r))
    return profile


def _tube_profile(tube: TubeSpec, spacing) -> list[tuple[int, float, float, float]]:
    """(slice offset, cx mm, cy mm, radius mm) pairs along the drifting line."""
    dx, dy, dz = tube.direction
    drift_x = dx / dz * spacing[2]
    drift_y = dy / dz * spacing[2]
    half = tube.span_slices // 2
    cx, cy, _ = tube.center_mm
    return [
        (off, cx + drift_x * off, cy + drift_y * off, tube.radius_mm)
        for off in range(-half, tube.span_slices - half)
    ]


def _paint_disk(plane, cx_mm, cy_mm, r_mm, intensity, spacing, origin):
    ny, nx = plane.shape
    cx = (cx_mm - origin[0]) / spacing[0]
    cy = (cy_mm - origin[1]) / spacing[1]
    rx = r_mm / spacing[0]
    ry = r_mm / spacing[1]
    x0, x1 = max(0, int(math.floor(cx - rx))), min(nx, int(math.ceil(cx + rx)) + 1)
    y0, y1 = max(0, int(math.floor(cy - ry))), min(ny, int(math.ceil(cy + ry)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1)
    ys = np.arange(y0, y1)
    mask = ((xs[None, :] - cx) / rx) ** 2 + ((ys[:, None] - cy) / ry) ** 2 <= 1.0
    region = plane[y0:y1, x0:x1]
    region[mask] = np.maximum(region[mask], intensity)


def _object_extent(obj, spacing) -> tuple[float, float]:
    """(in-plane reach mm, z reach mm) from the object center."""
    if isinstance(obj, SphereSpec):
        profile = _sphere_profile(obj, spacing)
        z_reach = max(abs(dz) for dz, _ in profile) * spacing[2] if profile else 0.0
        return obj.max_diameter_mm / 2.0, z_reach
    profile = _tube_profile(obj, spacing)
    cx, cy, _ = obj.center_mm
    reach = max(
        math.hypot(px - cx, py - cy) + r for _, px, py, r in profile
    )
    z_reach = max(abs(off) for off, *_ in profile) * spacing[2]
    return reach, z_reach


def generate(spec: PhantomSpec) -> tuple[CtVolume, list[GroundTruthNodule], list[GroundTruthNodule]]:
    """Render the phantom and emit exact ground truth.

    Returns (volume, nodule ground truth, tissue boxes). Overlapping objects
    resolve to the brighter intensity; Gaussian noise (from the spec seed) is
    added afterwards and the result is clamped to the valid HU range.
    """
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    grid = np.full((nz, ny, nx), float(spec.background_hu))

    for obj in spec.objects:
        inplane_reach, z_reach = _object_extent(obj, spec.spacing)
        cx, cy, cz = obj.center_mm
        if not (
            inplane_reach <= cx <= (nx - 1) * sx - inplane_reach
            and inplane_reach <= cy <= (ny - 1) * sy - inplane_reach
            and z_reach <= cz <= (nz - 1) * sz - z_reach
        ):
            raise ValidationError(f"object at {obj.center_mm} extends outside the volume")

        zc = int(round(cz / sz))
        if isinstance(obj, SphereSpec):
            for dz, r in _sphere_profile(obj, spec.spacing):
                z = zc + dz
                if 0 <= z < nz:
                    _paint_disk(grid[z], cx, cy, r, obj.intensity_hu, spec.spacing, (0.0, 0.0))
        elif isinstance(obj, TubeSpec):
            for off, px, py, r in _tube_profile(obj, spec.spacing):
                z = zc + off
                if 0 <= z < nz:
                    _paint_disk(grid[z], px, py, r, obj.intensity_hu, spec.spacing, (0.0, 0.0))
        else:
            raise ValidationError(f"unknown object type {type(obj).__name__}")

    if spec.noise_sigma_hu > 0:
        rng = np.random.default_rng(spec.seed)
        grid = grid + rng.normal(0.0, spec.noise_sigma_hu, size=grid.shape)
    grid = np.clip(np.rint(grid), *HU_CLAMP).astype(np.int16)
    volume = CtVolume(voxels=grid, spacing=spec.spacing, origin=(0.0, 0.0, 0.0))

    nodules = [
        GroundTruthNodule(spec.scan_id, o.center_mm, o.max_diameter_mm)
        for o in spec.objects
        if isinstance(o, SphereSpec)
    ]
    tissues = [
        GroundTruthNodule(spec.scan_id, o.center_mm, 2.0 * o.radius_mm)
        for o in spec.objects
        if isinstance(o, TubeSpec)
    ]
    return volume, nodules, tissues


@dataclass(frozen=True)
class LhiDataset:
    """Shuffled, split patch dataset ready for classifier training.

    Images are tau-normalized history grids; label 1 marks nodules.
    """

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.train_labels) + len(self.test_labels)


def label_patches(
    volume: CtVolume,
    nodules: list[GroundTruthNodule],
    tissues: list[GroundTruthNodule],
    params: LhiParams,
    seed: int = 0,
) -> LhiDataset:
    """Extract one labeled history patch per planted object and split 2:1."""
    if not nodules or not tissues:
        raise ValidationError("need at least one object of each class")
    images, labels = [], []
    for label, boxes in ((1, nodules), (0, tissues)):
        for box in boxes:
            cand = NoduleCandidate(box.scan_id, box.center_mm, box.diameter_mm, 1.0)
            images.append(lhi_for_candidate(volume, cand, params).normalized())
            labels.append(label)
    images_arr = np.stack(images)
    labels_arr = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels_arr))
    images_arr, labels_arr = images_arr[order], labels_arr[order]
    n_test = len(labels_arr) // 3
    return LhiDataset(
        train_images=images_arr[n_test:],
        train_labels=labels_arr[n_test:],
        test_images=images_arr[:n_test],
        test_labels=labels_arr[:n_test],
    )


def merge_datasets(datasets: list[LhiDataset]) -> LhiDataset:
    """Concatenate per-scan datasets, keeping their train/test assignment."""
    if not datasets:
        raise ValidationError("no datasets to merge")
    return LhiDataset(
        train_images=np.concatenate([d.train_images for d in datasets]),
        train_labels=np.concatenate([d.train_labels for d in datasets]),
        test_images=np.concatenate([d.test_images for d in datasets]),
        test_labels=np.concatenate([d.test_labels for d in datasets]),
    )


def sample_spec(
    seed: int,
    dims: tuple[int, int, int] = (96, 96, 48),
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    n_spheres: int = 3,
    n_tubes: int = 5,
    noise_sigma_hu: float = 5.0,
    scan_id: str = "phantom",
    sphere_diameter_mm: tuple[float, float] = (8.0, 16.0),
    tube_radius_mm: tuple[float, float] = (2.0, 4.0),
    intensity_hu: tuple[int, int] = (40, 120),
    min_separation_mm: float = 4.0,
    max_attempts: int = 200,
) -> PhantomSpec:
    """Randomly place non-overlapping spheres and tubes inside the volume.

    Placement is rejection-sampled; objects that cannot be placed within
    max_attempts are skipped, so very crowded requests may yield fewer
    objects than asked.
    """
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    sx, sy, sz = spacing
    placed: list[tuple[tuple[float, float, float], float]] = []
    objects = []

    def try_place(make_obj):
        for _ in range(max_attempts):
            obj = make_obj()
            reach, z_reach = _object_extent(obj, spacing)
            cx, cy, cz = obj.center_mm
            if not (
                reach + sx <= cx <= (nx - 1) * sx - reach - sx
                and reach + sy <= cy <= (ny - 1) * sy - reach - sy
                and z_reach + sz <= cz <= (nz - 1) * sz - z_reach - sz
            ):
                continue
            clear = all(
                math.dist(obj.center_mm, other_center) >= reach + other_reach + min_separation_mm
                for other_center, other_reach in placed
            )
            if clear:
                placed.append((obj.center_mm, max(reach, z_reach)))
                objects.append(obj)
                return
        # crowded volume; skip this object

    def random_center():
        return (
            float(rng.uniform(0, (nx - 1) * sx)),
            float(rng.uniform(0, (ny - 1) * sy)),
            float(rng.uniform(0, (nz - 1) * sz)),
        )

    def random_sphere():
        return SphereSpec(
            center_mm=random_center(),
            max_diameter_mm=float(rng.uniform(*sphere_diameter_mm)),
            growth="shrinking" if rng.random() < 0.5 else "expanding",
            intensity_hu=int(rng.integers(intensity_hu[0], intensity_hu[1] + 1)),
        )

    def random_tube():
        angle = float(rng.uniform(0, 2 * math.pi))
        return TubeSpec(
            center_mm=random_center(),
            radius_mm=float(rng.uniform(*tube_radius_mm)),
            direction=(
                DEFAULT_TUBE_DRIFT_VOX * math.cos(angle),
                DEFAULT_TUBE_DRIFT_VOX * math.sin(angle),
                1.0,
            ),
            intensity_hu=int(rng.integers(intensity_hu[0], intensity_hu[1] + 1)),
        )

    for _ in range(n_spheres):
        try_place(random_sphere)
    for _ in range(n_tubes):
        try_place(random_tube)
    return PhantomSpec(
        dims=dims,
        spacing=spacing,
        noise_sigma_hu=noise_sigma_hu,
        objects=tuple(objects),
        seed=seed,
        scan_id=scan_id,
    )


# -- JSON spec files ------------------------------------------------------------

def spec_to_json(spec: PhantomSpec) -> str:
    objects = []
    for obj in spec.objects:
        if isinstance(obj, SphereSpec):
            objects.append({
                "sphere": {
                    "center_mm": list(obj.center_mm),
                    "max_diameter_mm": obj.max_diameter_mm,
                    "growth": obj.growth,
                    "intensity_hu": obj.intensity_hu,
                    "radius_step_vox": obj.radius_step_vox,
                }
            })
        else:
            objects.append({
                "tube": {
                    "center_mm": list(obj.center_mm),
                    "radius_mm": obj.radius_mm,
                    "direction": list(obj.direction),
                    "span_slices": obj.span_slices,
                    "intensity_hu": obj.intensity_hu,
                }
            })
    payload = {
        "dims": list(spec.dims),
        "spacing": list(spec.spacing),
        "background_hu": spec.background_hu,
        "noise_sigma_hu": spec.noise_sigma_hu,
        "seed": spec.seed,
        "scan_id": spec.scan_id,
        "objects": objects,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def spec_from_json(text: str) -> PhantomSpec:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid phantom spec JSON: {exc}") from exc
    try:
        objects = []
        for entry in payload.get("objects", []):
            if "sphere" in entry:
                s = entry["sphere"]
                objects.append(SphereSpec(
                    center_mm=tuple(s["center_mm"]),
                    max_diameter_mm=s["max_diameter_mm"],
                    growth=s.get("growth", "shrinking"),
                    intensity_hu=s.get("intensity_hu", 60),
                    radius_step_vox=s.get("radius_step_vox", DEFAULT_SPHERE_STEP_VOX),
                ))
            elif "tube" in entry:
                t = entry["tube"]
                objects.append(TubeSpec(
                    center_mm=tuple(t["center_mm"]),
                    radius_mm=t["radius_mm"],
                    direction=tuple(t.get("direction", (1.5, 0.0, 1.0))),
                    span_slices=t.get("span_slices", 15),
                    intensity_hu=t.get("intensity_hu", 60),
                ))
            else:
                raise FormatError(f"object entry must contain 'sphere' or 'tube': {entry}")
        return PhantomSpec(
            dims=tuple(payload["dims"]),
            spacing=tuple(payload.get("spacing", (1.0, 1.0, 1.0))),
            background_hu=payload.get("background_hu", DEFAULT_BACKGROUND_HU),
            noise_sigma_hu=payload.get("noise_sigma_hu", DEFAULT_NOISE_SIGMA),
            objects=tuple(objects),
            seed=payload.get("seed", 0),
            scan_id=payload.get("scan_id", "phantom"),
        )
    except KeyError as exc:
        raise FormatError(f"phantom spec JSON missing required key {exc}") from exc
