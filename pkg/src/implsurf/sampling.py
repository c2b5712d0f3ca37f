"""Query-point datasets and coordinate conversions.

Normalized coordinates follow the voxel-center convention: voxel i of an
axis with D voxels sits at (2*i + 1) / D - 1, so trilinear sampling at a
voxel center reproduces the stored value exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .errors import DegenerateInput, InvalidArgument
from .geometry import ImplicitShape, TriMesh
from .volume import VolumeGrid

TAG_VOLUME = 0
TAG_BOUNDARY = 1

# boundary-point jitter: half the points far off the surface, half close in
DEFAULT_SIGMAS = [(0.5, 0.1), (0.5, 0.01)]


@dataclass(frozen=True)
class CoordinateFrame:
    """Voxel lattice placement: dims (x, y, z), spacing, origin."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def of(cls, v: VolumeGrid) -> "CoordinateFrame":
        return cls(v.dims, v.spacing, v.origin)

    def normalized_to_voxel(self, pts: np.ndarray) -> np.ndarray:
        """Continuous voxel-center coordinates (voxel i center at index i)."""
        d = np.asarray(self.dims, dtype=np.float64)
        return ((np.asarray(pts, dtype=np.float64) + 1.0) * d - 1.0) / 2.0

    def voxel_to_normalized(self, idx: np.ndarray) -> np.ndarray:
        d = np.asarray(self.dims, dtype=np.float64)
        return (2.0 * np.asarray(idx, dtype=np.float64) + 1.0) / d - 1.0

    def voxel_to_world(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx, dtype=np.float64) * np.asarray(self.spacing)

    def normalized_to_world(self, pts: np.ndarray) -> np.ndarray:
        return self.voxel_to_world(self.normalized_to_voxel(pts))

    def world_to_normalized(self, pts: np.ndarray) -> np.ndarray:
        idx = (np.asarray(pts, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)
        return self.voxel_to_normalized(idx)


@dataclass(frozen=True)
class QuerySet:
    """Continuous query points with per-organ occupancy labels.

    coords: (n, 3) normalized [-1, 1] coordinates; labels: (n, c) in {0, 1};
    tags: (n,) source markers (0 = volume sample, 1 = boundary sample).
    """

    coords: np.ndarray
    labels: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.coords, dtype=np.float64).reshape(-1, 3)
        l = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if l.ndim == 1:
            l = l[:, None]
        t = np.ascontiguousarray(self.tags, dtype=np.uint8).reshape(-1)
        if len(l) != len(c) or len(t) != len(c):
            raise InvalidArgument("coords, labels, tags must have matching lengths")
        if l.size and l.max() > 1:
            raise InvalidArgument("labels must be 0 or 1")
        for a in (c, l, t):
            a.flags.writeable = False
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "labels", l)
        object.__setattr__(self, "tags", t)

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def c(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx: np.ndarray) -> "QuerySet":
        return QuerySet(self.coords[idx], self.labels[idx], self.tags[idx])


def sample_volume_points(v: VolumeGrid, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n voxel centers uniformly from non-background voxels.

    Background means exact equality with the grid's recorded fill value; a
    grid without a recorded fill has no background.
    """
    flat = v.values.ravel()
    if v.fill is None:
        eligible = np.arange(flat.size)
    else:
        eligible = np.nonzero(flat != np.asarray(v.fill, dtype=flat.dtype))[0]
    if eligible.size == 0:
        raise DegenerateInput("volume has no non-background voxels to sample")
    pick = eligible[rng.integers(0, eligible.size, size=n)]
    dx, dy, dz = v.dims
    ix = pick % dx
    iy = (pick // dx) % dy
    iz = pick // (dx * dy)
    frame = CoordinateFrame.of(v)
    return frame.voxel_to_normalized(np.stack([ix, iy, iz], axis=1))


@dataclass(frozen=True)
class SampleBudget:
    """Per-source point counts for building a query set."""

    volume: int
    boundary_per_organ: tuple[int, ...]


def build_queryset(
    shapes: list[ImplicitShape],
    meshes: list[TriMesh],
    v: VolumeGrid,
    budget: SampleBudget,
    rng: np.random.Generator,
    sigmas: list[tuple[float, float]] | None = None,
) -> QuerySet:
    """Concatenate volume samples and per-organ boundary samples with labels.

    Labels come from the shapes' signed distance sign at the final (clamped)
    coordinates, one column per organ.
    """
    if len(shapes) != len(meshes):
        raise InvalidArgument("one mesh per shape required")
    if budget.volume <= 0 or any(b <= 0 for b in budget.boundary_per_organ):
        raise InvalidArgument("budgets must be positive")
    if len(budget.boundary_per_organ) != len(shapes):
        raise InvalidArgument("need one boundary budget per organ")
    sigmas = DEFAULT_SIGMAS if sigmas is None else sigmas

    parts = [sample_volume_points(v, budget.volume, rng)]
    tags = [np.zeros(budget.volume, dtype=np.uint8)]
    for mesh, nb in zip(meshes, budget.boundary_per_organ):
        pts = geometry.sample_surface_points(mesh, nb, sigmas, rng)
        parts.append(pts)
        tags.append(np.full(len(pts), TAG_BOUNDARY, dtype=np.uint8))
    coords = np.clip(np.concatenate(parts), -1.0, 1.0)
    labels = np.stack(
        [geometry.point_occupancy(s, coords) for s in shapes], axis=1
    ).astype(np.uint8)
    return QuerySet(coords, labels, np.concatenate(tags))


def to_patch_frame(
    q: QuerySet,
    patch_offset: tuple[int, int, int],
    patch_size: tuple[int, int, int],
    parent: CoordinateFrame,
) -> QuerySet:
    """Re-express query points in a patch's own normalized frame.

    Keeps only points inside the patch's half-open voxel box (membership is
    patch coordinate in [-1, 1) per axis, so adjacent patches never share a
    boundary point); labels and tags are unchanged. The map is exactly
    invertible on retained points (:func:`from_patch_frame`).
    """
    off = np.asarray(patch_offset, dtype=np.float64)
    size = np.asarray(patch_size, dtype=np.float64)
    dims = np.asarray(parent.dims, dtype=np.float64)
    if (off < 0).any() or (off + size > dims).any():
        raise InvalidArgument(f"patch {patch_offset}+{patch_size} outside parent dims {parent.dims}")
    local = ((q.coords + 1.0) * dims - 2.0 * off) / size - 1.0
    keep = ((local >= -1.0) & (local < 1.0)).all(axis=1)
    return QuerySet(local[keep], q.labels[keep], q.tags[keep])


def from_patch_frame(
    coords: np.ndarray,
    patch_offset: tuple[int, int, int],
    patch_size: tuple[int, int, int],
    parent: CoordinateFrame,
) -> np.ndarray:
    """Inverse of :func:`to_patch_frame` on coordinates."""
    off = np.asarray(patch_offset, dtype=np.float64)
    size = np.asarray(patch_size, dtype=np.float64)
    dims = np.asarray(parent.dims, dtype=np.float64)
    return ((np.asarray(coords) + 1.0) * size + 2.0 * off) / dims - 1.0


def points_with_occupancy_from_highres(
    shape: ImplicitShape,
    lowres_mask: VolumeGrid,
    points: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Labels from the exact analytic source and from a low-res mask lookup.

    Returns (exact, mask-derived) 0/1 arrays; the two regimes disagree only
    within about half a mask voxel of the true surface.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    exact = geometry.point_occupancy(shape, pts)
    frame = CoordinateFrame.of(lowres_mask)
    idx = np.rint(frame.normalized_to_voxel(pts)).astype(np.int64)
    dims = np.asarray(lowres_mask.dims)
    np.clip(idx, 0, dims - 1, out=idx)
    seg = (lowres_mask.values[idx[:, 2], idx[:, 1], idx[:, 0]] > 0.5).astype(np.uint8)
    return exact, seg


# ---------------------------------------------------------------------------
# QuerySet file format: JSON header at <path>, payload at <path>.raw with
# coords (f32 LE), labels (u8), tags (u8) concatenated in that order
# ---------------------------------------------------------------------------

def save_queryset(path: str | Path, q: QuerySet, meta: dict | None = None) -> None:
    path = Path(path)
    header = {
        "n": q.n,
        "c": q.c,
        "fields": ["coords", "labels", "tags"],
        "dtypes": {"coords": "f32", "labels": "u8", "tags": "u8"},
        "payload": path.name + ".raw",
    }
    if meta:
        header["meta"] = meta
    path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    payload = (
        q.coords.astype("<f4").tobytes()
        + q.labels.astype(np.uint8).tobytes()
        + q.tags.astype(np.uint8).tobytes()
    )
    Path(str(path) + ".raw").write_bytes(payload)


def load_queryset(path: str | Path) -> QuerySet:
    path = Path(path)
    header = json.loads(path.read_text())
    n, c = header["n"], header["c"]
    raw = Path(str(path) + ".raw").read_bytes()
    coords = np.frombuffer(raw[: n * 12], dtype="<f4").reshape(n, 3)
    labels = np.frombuffer(raw[n * 12: n * 12 + n * c], dtype=np.uint8).reshape(n, c)
    tags = np.frombuffer(raw[n * 12 + n * c: n * 13 + n * c], dtype=np.uint8)
    return QuerySet(coords.astype(np.float64), labels.copy(), tags.copy())
