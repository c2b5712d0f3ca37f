"""Voxel-grid data model: normalization, padding, resampling, patch geometry.

Conventions used throughout the package:

* ``VolumeGrid.values`` is indexed ``[z, y, x]`` (C order, x fastest), while
  ``dims``/``spacing``/``origin`` are reported per axis as (x, y, z).
* World coordinate of voxel (ix, iy, iz) center = origin + index * spacing.
* Normalized coordinate of voxel center i along an axis with D voxels is
  (2*i + 1) / D - 1, so the voxel boxes exactly tile [-1, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DegenerateInput, InvalidArgument

Vec3 = tuple[float, float, float]
IVec3 = tuple[int, int, int]


@dataclass(frozen=True)
class VolumeGrid:
    """A scalar voxel grid with world placement.

    ``fill`` records the background/padding intensity when one is known;
    background-discarding samplers compare against it by exact equality.
    Grids are immutable after construction (the value buffer is locked).
    """

    values: np.ndarray
    spacing: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)
    fill: float | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.values)
        if v.ndim != 3 or v.size == 0:
            raise InvalidArgument(f"volume values must be a non-empty 3D array, got shape {v.shape}")
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float32)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if any(s <= 0 for s in self.spacing):
            raise InvalidArgument(f"spacing must be strictly positive, got {self.spacing}")
        if self.fill is not None:
            object.__setattr__(self, "fill", float(self.fill))

    @property
    def dims(self) -> IVec3:
        """(dx, dy, dz) voxel counts."""
        dz, dy, dx = self.values.shape
        return (dx, dy, dz)

    def world_of_voxel(self, idx: np.ndarray) -> np.ndarray:
        """World coordinates of voxel-center indices (..., 3) given as (ix, iy, iz)."""
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing)

    def with_values(self, values: np.ndarray) -> "VolumeGrid":
        return VolumeGrid(values, self.spacing, self.origin, self.fill)


@dataclass(frozen=True)
class NormStats:
    """Moments removed by :func:`normalize` (population statistics)."""

    mean: float
    std: float


@dataclass(frozen=True)
class PatchLayout:
    """Tiling of a (padded) volume into equal-size overlapping patches."""

    patch_size: IVec3
    stride: IVec3
    offsets: list[IVec3] = field(default_factory=list)
    padded_dims: IVec3 = (0, 0, 0)


def normalize(v: VolumeGrid) -> tuple[VolumeGrid, NormStats]:
    """Shift/scale values to zero mean, unit population std.

    The recorded fill value, when present, is mapped through the same
    transform so background comparisons keep working after normalization.
    """
    vals = v.values.astype(np.float64)
    mean = float(vals.mean())
    std = float(vals.std())
    if std <= 0.0 or not np.isfinite(std):
        raise DegenerateInput("cannot normalize a constant volume (std = 0)")
    out = ((vals - mean) / std).astype(v.values.dtype)
    fill = None if v.fill is None else (v.fill - mean) / std
    return VolumeGrid(out, v.spacing, v.origin, fill), NormStats(mean, std)


def pad_to_cube(v: VolumeGrid, side: int, fill: float | None = None) -> VolumeGrid:
    """Center the volume inside a ``side``^3 cube, padding with ``fill``.

    ``fill`` defaults to the grid's recorded fill, else its minimum value.
    The origin shifts so original voxels keep their world coordinates.
    """
    side = int(side)
    dx, dy, dz = v.dims
    if side < max(v.dims):
        raise InvalidArgument(f"side {side} smaller than dims {v.dims}")
    if fill is None:
        fill = v.fill if v.fill is not None else float(v.values.min())
    off = tuple((side - d) // 2 for d in (dx, dy, dz))
    out = np.full((side, side, side), fill, dtype=v.values.dtype)
    out[off[2]:off[2] + dz, off[1]:off[1] + dy, off[0]:off[0] + dx] = v.values
    origin = tuple(o - off[i] * v.spacing[i] for i, o in enumerate(v.origin))
    return VolumeGrid(out, v.spacing, origin, float(fill))


def voxel_center_coords(dims: IVec3) -> np.ndarray:
    """Normalized (x, y, z) coordinates of every voxel center, z-major order.

    Returns (dx*dy*dz, 3); row order matches ``values.ravel()``.
    """
    dx, dy, dz = dims
    cz = (2 * np.arange(dz) + 1.0) / dz - 1.0
    cy = (2 * np.arange(dy) + 1.0) / dy - 1.0
    cx = (2 * np.arange(dx) + 1.0) / dx - 1.0
    zz, yy, xx = np.meshgrid(cz, cy, cx, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def scaled_frame(v: VolumeGrid, new_dims: IVec3) -> tuple[Vec3, Vec3]:
    """(spacing, origin) of a grid re-gridded to new_dims over the same box.

    Voxel 0 of the new grid sits at normalized (1/nd - 1); mapped through
    the old frame via continuous old index ((n + 1) * D_old - 1) / 2.
    """
    old = v.dims
    spacing = tuple(v.spacing[i] * old[i] / new_dims[i] for i in range(3))
    origin = tuple(
        v.origin[i] + (((1.0 / new_dims[i]) * old[i] - 1.0) / 2.0) * v.spacing[i]
        for i in range(3)
    )
    return spacing, origin


def resample(v: VolumeGrid, new_dims: IVec3) -> VolumeGrid:
    """Trilinear resampling onto ``new_dims`` voxel centers.

    Spacing is rescaled so the physical extent is preserved; a globally
    affine intensity field is reproduced exactly at any resolution.
    """
    nd = tuple(int(d) for d in new_dims)
    if any(d <= 0 for d in nd):
        raise InvalidArgument(f"new_dims must be positive, got {new_dims}")
    pts = voxel_center_coords(nd)
    sampled = kernels.trilinear_gather(v.values[None], pts)[0]
    out = sampled.reshape(nd[2], nd[1], nd[0]).astype(v.values.dtype)
    spacing, origin = scaled_frame(v, nd)
    return VolumeGrid(out, spacing, origin, v.fill)


def plan_patches(dims: IVec3, patch_size: IVec3, stride: IVec3) -> PatchLayout:
    """Plan a complete tiling by ``patch_size`` patches at ``stride`` steps.

    The volume is padded (per axis) to the smallest size that a whole number
    of strides tiles exactly; offsets are enumerated in z-y-x lexicographic
    order. Every padded voxel is covered by at least one patch.
    """
    dims = tuple(int(d) for d in dims)
    patch = tuple(int(p) for p in patch_size)
    stride = tuple(int(s) for s in stride)
    if any(s <= 0 for s in stride):
        raise InvalidArgument(f"stride must be positive, got {stride}")
    if any(s > p for s, p in zip(stride, patch)):
        raise InvalidArgument(f"stride {stride} exceeds patch size {patch}")
    padded = []
    axis_offsets = []
    for d, p, s in zip(dims, patch, stride):
        n_steps = max(0, -(-(d - p) // s))  # ceil((d - p) / s), at least 0
        padded.append(p + n_steps * s)
        axis_offsets.append([i * s for i in range(n_steps + 1)])
    offsets = [
        (ox, oy, oz)
        for oz in axis_offsets[2]
        for oy in axis_offsets[1]
        for ox in axis_offsets[0]
    ]
    return PatchLayout(patch, stride, offsets, tuple(padded))


def extract_patch(v: VolumeGrid, offset: IVec3, size: IVec3) -> VolumeGrid:
    """Copy a sub-volume; origin is set so world coordinates are preserved."""
    off = tuple(int(o) for o in offset)
    size = tuple(int(s) for s in size)
    if any(o < 0 for o in off) or any(o + s > d for o, s, d in zip(off, size, v.dims)):
        raise InvalidArgument(f"patch offset {off} size {size} out of bounds for dims {v.dims}")
    vals = v.values[off[2]:off[2] + size[2], off[1]:off[1] + size[1], off[0]:off[0] + size[0]].copy()
    origin = tuple(v.origin[i] + off[i] * v.spacing[i] for i in range(3))
    return VolumeGrid(vals, v.spacing, origin, v.fill)


def is_background_patch(p: VolumeGrid) -> bool:
    """True iff the patch is constant (max intensity equals min intensity)."""
    return bool(p.values.max() == p.values.min())


# ---------------------------------------------------------------------------
# .vol file format: JSON header at <path>, raw little-endian f32 payload at
# <path>.raw, x fastest-varying (exactly values.ravel() order)
# ---------------------------------------------------------------------------

def save_vol(path: str | Path, v: VolumeGrid, meta: dict | None = None) -> None:
    path = Path(path)
    header = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "dtype": "f32",
        "order": "z-major",
        "payload": path.name + ".raw",
    }
    if v.fill is not None:
        header["fill"] = v.fill
    if meta:
        header["meta"] = meta
    path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    payload = v.values.astype("<f4").ravel().tobytes()
    Path(str(path) + ".raw").write_bytes(payload)


def load_vol(path: str | Path) -> VolumeGrid:
    path = Path(path)
    header = json.loads(path.read_text())
    dims = header["dims"]
    raw = Path(str(path) + ".raw").read_bytes()
    vals = np.frombuffer(raw, dtype="<f4").copy()
    if vals.size != dims[0] * dims[1] * dims[2]:
        raise InvalidArgument(f"payload size {vals.size} does not match dims {dims}")
    vals = vals.reshape(dims[2], dims[1], dims[0])
    return VolumeGrid(
        vals,
        tuple(header["spacing"]),
        tuple(header["origin"]),
        header.get("fill"),
    )
