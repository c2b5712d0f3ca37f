"""Paired image/query-point affine augmentation.

One affine map A acts on normalized coordinates: query points move forward
(p -> A p) while the image is pulled back (output voxel q samples the
source at A^-1 q), so the warped image evaluated at a transformed point
matches the original image at the original point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidArgument
from .sampling import QuerySet
from .volume import VolumeGrid, voxel_center_coords


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling ranges; defaults keep organs inside the frame at this scale.

    translation is in normalized units (fraction of the half-extent),
    rotation in degrees per axis, scale multiplicative per axis.
    """

    translation: float = 0.1
    rotation_deg: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if self.scale_range[0] <= 0:
            raise InvalidArgument("scale range must exclude 0")


@dataclass(frozen=True)
class AffineAugment:
    """A 4x4 homogeneous transform on normalized coordinates plus the
    components it was composed from (for logging)."""

    matrix: np.ndarray
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4) or not np.allclose(m[3], [0, 0, 0, 1]):
            raise InvalidArgument("matrix must be 4x4 homogeneous with last row (0,0,0,1)")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise InvalidArgument("affine matrix is singular")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    def inverse_matrix(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)


def _rotation(angles_deg: np.ndarray) -> np.ndarray:
    ax, ay, az = np.deg2rad(angles_deg)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def sample_affine(cfg: AugmentConfig, rng: np.random.Generator) -> AffineAugment:
    """Draw A = T * R * S with uniform components (fixed draw order)."""
    t = rng.uniform(-cfg.translation, cfg.translation, size=3)
    angles = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg, size=3)
    scales = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=3)
    m = np.eye(4)
    m[:3, :3] = _rotation(angles) @ np.diag(scales)
    m[:3, 3] = t
    return AffineAugment(
        m,
        {
            "translation": t.tolist(),
            "rotation_deg": angles.tolist(),
            "scale": scales.tolist(),
        },
    )


def transform_points(points: np.ndarray, a: AffineAugment) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return p @ a.matrix[:3, :3].T + a.matrix[:3, 3]


def warp_volume(v: VolumeGrid, a: AffineAugment) -> VolumeGrid:
    """Pull-back resampling: output voxel at q holds the source at A^-1 q.

    Samples falling outside the source cube take the background fill.
    """
    inv = a.inverse_matrix()
    dims = v.dims
    q = voxel_center_coords(dims)
    src = q @ inv[:3, :3].T + inv[:3, 3]
    vals = kernels.trilinear_gather(v.values[None], src)[0]
    outside = (np.abs(src) > 1.0).any(axis=1)
    fill = v.fill if v.fill is not None else float(v.values.min())
    vals = np.where(outside, np.asarray(fill, dtype=vals.dtype), vals)
    out = vals.reshape(dims[2], dims[1], dims[0]).astype(v.values.dtype)
    return VolumeGrid(out, v.spacing, v.origin, v.fill)


def apply_paired(
    v: VolumeGrid,
    q: QuerySet,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[VolumeGrid, QuerySet]:
    """Draw one affine and apply it jointly to volume and query points.

    Labels are unchanged; points transformed outside [-1, 1]^3 are dropped.
    """
    a = sample_affine(cfg, rng)
    warped = warp_volume(v, a)
    pts = transform_points(q.coords, a)
    keep = (np.abs(pts) <= 1.0).all(axis=1)
    return warped, QuerySet(pts[keep], q.labels[keep], q.tags[keep])
