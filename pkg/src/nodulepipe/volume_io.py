"""CT volume container, MetaImage (.mhd/.raw) I/O, and coordinate transforms.

Volumes are dense grids of signed 16-bit Hounsfield intensities stored
slice-major (z outermost), with physical spacing and origin in millimeters.
World coordinates follow the MetaImage convention: world = origin + index * spacing,
with axes ordered (x, y, z) in headers and (z, y, x) in the voxel array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import FormatError, ValidationError

# element width in bytes and numpy base dtype per MetaImage scalar type
_ELEMENT_TYPES = {
    "MET_CHAR": "i1",
    "MET_UCHAR": "u1",
    "MET_SHORT": "i2",
    "MET_USHORT": "u2",
    "MET_INT": "i4",
    "MET_UINT": "u4",
    "MET_FLOAT": "f4",
    "MET_DOUBLE": "f8",
}

HU_AIR = -1000
_HU_MIN = -32768
_HU_MAX = 32767

_IDENTITY_3X3 = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)


def _fmt(values) -> str:
    return " ".join(str(v) for v in values)


@dataclass(frozen=True)
class VolumeHeader:
    """Parsed key/value content of an MHD header."""

    ndims: int
    dim_size: tuple[int, int, int]
    element_type: str
    element_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    element_data_file: str = "LOCAL"
    byte_order_msb: bool = False
    transform_matrix: tuple[float, ...] = _IDENTITY_3X3
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ndims != 3:
            raise FormatError(f"NDims must be 3, got {self.ndims}")
        if any(d < 1 for d in self.dim_size):
            raise FormatError(f"DimSize entries must be positive, got {self.dim_size}")
        if self.element_type not in _ELEMENT_TYPES:
            raise FormatError(f"unsupported ElementType {self.element_type!r}")

    @property
    def element_width(self) -> int:
        return int(_ELEMENT_TYPES[self.element_type][-1])

    @property
    def voxel_count(self) -> int:
        return self.dim_size[0] * self.dim_size[1] * self.dim_size[2]


@dataclass(frozen=True)
class CtVolume:
    """A 3D CT intensity grid with physical geometry.

    voxels: int16 HU array of shape (nz, ny, nx).
    spacing: mm per voxel along (x, y, z); all components positive.
    origin: world-mm position of voxel (0, 0, 0).

    Immutable after construction; safe to share across threads.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ValidationError(f"voxel grid must be 3-D, got shape {self.voxels.shape}")
        if self.voxels.dtype != np.int16:
            raise ValidationError(f"voxels must be int16 HU, got {self.voxels.dtype}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be 3 positive reals, got {self.spacing}")
        if len(self.origin) != 3:
            raise ValidationError(f"origin must have 3 components, got {self.origin}")
        self.voxels.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Voxel counts per axis in (x, y, z) order."""
        nz, ny, nx = self.voxels.shape
        return (nx, ny, nz)

    def world_to_voxel(self, point_mm) -> tuple[float, float, float]:
        """Map a world-mm point to continuous voxel coordinates (x, y, z)."""
        return tuple(
            (float(p) - o) / s for p, o, s in zip(point_mm, self.origin, self.spacing)
        )

    def voxel_to_world(self, index) -> tuple[float, float, float]:
        """Map voxel coordinates (x, y, z) to a world-mm point."""
        return tuple(
            o + float(i) * s for i, o, s in zip(index, self.origin, self.spacing)
        )


def world_to_voxel(volume: CtVolume, point_mm) -> tuple[float, float, float]:
    return volume.world_to_voxel(point_mm)


def voxel_to_world(volume: CtVolume, index) -> tuple[float, float, float]:
    return volume.voxel_to_world(index)


def parse_mhd_header(header_text: str) -> VolumeHeader:
    """Parse MHD header text into a VolumeHeader.

    Each non-blank line must read "Key = value". Unknown keys are kept in
    ``extra``; compressed or ASCII payloads and non-identity TransformMatrix
    are rejected.
    """
    fields: dict[str, str] = {}
    for line in header_text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"malformed header line (no '='): {line.strip()!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()

    def take(key, default=None):
        return fields.pop(key, default)

    try:
        ndims = int(take("NDims", "0"))
        dim_raw = take("DimSize")
        if dim_raw is None:
            raise FormatError("missing DimSize")
        dim_size = tuple(int(v) for v in dim_raw.split())
        spacing_raw = take("ElementSpacing") or take("ElementSize") or "1 1 1"
        spacing = tuple(float(v) for v in spacing_raw.split())
        offset = tuple(float(v) for v in (take("Offset") or take("Position") or "0 0 0").split())
    except ValueError as exc:
        raise FormatError(f"malformed numeric header field: {exc}") from exc

    element_type = take("ElementType", "")
    data_file = take("ElementDataFile", "LOCAL")
    byte_order = (take("BinaryDataByteOrderMSB", "False").lower() == "true"
                  or take("ElementByteOrderMSB", "False").lower() == "true")

    if take("CompressedData", "False").lower() == "true":
        raise FormatError("compressed MHD payloads are not supported")
    if take("BinaryData", "True").lower() != "true":
        raise FormatError("ASCII MHD payloads are not supported")
    take("ObjectType")

    transform = _IDENTITY_3X3
    tm_raw = take("TransformMatrix")
    if tm_raw is not None:
        transform = tuple(float(v) for v in tm_raw.split())
        if len(transform) != 9:
            raise FormatError(f"TransformMatrix must have 9 entries, got {len(transform)}")
        if any(abs(a - b) > 1e-9 for a, b in zip(transform, _IDENTITY_3X3)):
            raise ValidationError("non-identity TransformMatrix is not supported")

    if len(dim_size) != ndims or len(spacing) != ndims or len(offset) != ndims:
        raise FormatError(
            f"DimSize/ElementSpacing/Offset arity does not match NDims={ndims}"
        )
    if any(s <= 0 for s in spacing):
        raise FormatError(f"ElementSpacing entries must be positive, got {spacing}")

    return VolumeHeader(
        ndims=ndims,
        dim_size=dim_size,  # type: ignore[arg-type]
        element_type=element_type,
        element_spacing=spacing,  # type: ignore[arg-type]
        offset=offset,  # type: ignore[arg-type]
        element_data_file=data_file,
        byte_order_msb=byte_order,
        transform_matrix=transform,
        extra=fields,
    )


def parse_mhd(header_text: str, raw_bytes: bytes) -> CtVolume:
    """Decode an MHD header plus raw payload into a CtVolume.

    The payload is interpreted per ElementType (little-endian unless the
    header says otherwise) and converted to int16 HU; float intensities are
    rounded and clipped to the int16 range.
    """
    header = parse_mhd_header(header_text)
    expected = header.voxel_count * header.element_width
    if len(raw_bytes) != expected:
        raise FormatError(
            f"raw payload size mismatch: expected {expected} bytes "
            f"({_fmt(header.dim_size)} x {header.element_width}), got {len(raw_bytes)}"
        )
    dtype = np.dtype((">" if header.byte_order_msb else "<") + _ELEMENT_TYPES[header.element_type])
    flat = np.frombuffer(raw_bytes, dtype=dtype)
    nx, ny, nz = header.dim_size
    grid = flat.reshape(nz, ny, nx)
    if grid.dtype != np.int16:
        grid = np.clip(np.rint(grid.astype(np.float64)), _HU_MIN, _HU_MAX).astype(np.int16)
    else:
        grid = grid.astype(np.int16)  # normalizes byte order, copies
    return CtVolume(voxels=grid, spacing=header.element_spacing, origin=header.offset)


def write_mhd(volume: CtVolume, raw_filename: str = "volume.raw") -> tuple[str, bytes]:
    """Encode a CtVolume as (header text, raw payload bytes).

    parse_mhd(write_mhd(v)) reproduces v bit-exactly. The payload is always
    little-endian MET_SHORT.
    """
    nx, ny, nz = volume.dims
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"DimSize = {nx} {ny} {nz}",
        "ElementType = MET_SHORT",
        f"ElementSpacing = {_fmt(volume.spacing)}",
        f"Offset = {_fmt(volume.origin)}",
        f"ElementDataFile = {raw_filename}",
    ]
    header = "\n".join(lines) + "\n"
    raw = np.ascontiguousarray(volume.voxels, dtype="<i2").tobytes()
    return header, raw


def save_mhd(volume: CtVolume, mhd_path) -> None:
    """Write <stem>.mhd and <stem>.raw next to each other."""
    mhd_path = Path(mhd_path)
    raw_path = mhd_path.with_suffix(".raw")
    header, raw = write_mhd(volume, raw_filename=raw_path.name)
    mhd_path.write_text(header)
    raw_path.write_bytes(raw)


def load_mhd(mhd_path) -> CtVolume:
    """Read an .mhd header and its sibling raw payload file."""
    mhd_path = Path(mhd_path)
    header_text = mhd_path.read_text()
    header = parse_mhd_header(header_text)
    if header.element_data_file.upper() == "LOCAL":
        raise FormatError("embedded (LOCAL) payloads are not supported; expected a .raw file")
    raw = (mhd_path.parent / header.element_data_file).read_bytes()
    return parse_mhd(header_text, raw)


def resample_isotropic(volume: CtVolume, target_spacing_mm: float) -> CtVolume:
    """Trilinearly resample to an isotropic grid of the given spacing.

    Output dims are round(dims * spacing / target); the origin is preserved.
    Edge samples clamp to the nearest voxel.
    """
    if target_spacing_mm <= 0:
        raise ValidationError(f"target spacing must be positive, got {target_spacing_mm}")
    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing
    out_dims = (
        int(round(nx * sx / target_spacing_mm)),
        int(round(ny * sy / target_spacing_mm)),
        int(round(nz * sz / target_spacing_mm)),
    )
    if any(d < 1 for d in out_dims):
        raise ValidationError(
            f"target spacing {target_spacing_mm} mm collapses dims {volume.dims} to {out_dims}"
        )
    ox, oy, oz = out_dims
    # output voxel i samples input coordinate i * target / spacing, per axis
    xs = np.arange(ox) * (target_spacing_mm / sx)
    ys = np.arange(oy) * (target_spacing_mm / sy)
    zs = np.arange(oz) * (target_spacing_mm / sz)
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    sampled = map_coordinates(
        volume.voxels.astype(np.float64), [zz, yy, xx], order=1, mode="nearest"
    )
    grid = np.clip(np.rint(sampled), _HU_MIN, _HU_MAX).astype(np.int16)
    return CtVolume(
        voxels=grid,
        spacing=(target_spacing_mm,) * 3,
        origin=volume.origin,
    )


_AXIS_TO_DIM = {"x": 2, "y": 1, "z": 0}  # voxel array is (z, y, x)


def flip_volume(volume: CtVolume, axes) -> CtVolume:
    """Mirror the volume along the named axes (any subset of {x, y, z})."""
    axes = set(axes)
    unknown = axes - set(_AXIS_TO_DIM)
    if unknown:
        raise ValidationError(f"unknown flip axes {sorted(unknown)}")
    if not axes:
        return volume
    flipped = np.flip(volume.voxels, axis=[_AXIS_TO_DIM[a] for a in sorted(axes)]).copy()
    return CtVolume(voxels=flipped, spacing=volume.spacing, origin=volume.origin)


def flip_world_point(volume: CtVolume, point_mm, axes) -> tuple[float, float, float]:
    """World-coordinate transform matching flip_volume: c -> origin + extent - (c - origin).

    extent is (dims - 1) * spacing, so voxel i maps to dims - 1 - i.
    """
    axes = set(axes)
    out = list(float(p) for p in point_mm)
    for name, axis in (("x", 0), ("y", 1), ("z", 2)):
        if name in axes:
            extent = (volume.dims[axis] - 1) * volume.spacing[axis]
            out[axis] = volume.origin[axis] + extent - (out[axis] - volume.origin[axis])
    return tuple(out)
