"""Triangle meshes, marching cubes, smoothing, surface sampling, containment.

Meshes live in world coordinates. Marching cubes treats values above the
iso level as inside and orients triangles with outward normals; vertices
are emitted in cell scan order (z-major), deduplicated per grid edge, so
output is deterministic and watertight on interior level sets.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from ._mc_tables import CORNER_OFFSETS, EDGE_ANCHOR, EDGE_TABLE, TRI_TABLE
from .errors import InvalidArgument, TopologyError
from .volume import VolumeGrid


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64, world coordinates
    triangles: np.ndarray  # (T, 3) int64 vertex indices

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidArgument("triangle index out of range")
        if t.size and (
            (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
        ).any():
            raise InvalidArgument("degenerate triangle (repeated vertex index)")
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return len(self.triangles) == 0


class ImplicitShape:
    """A shape described by a signed distance field (negative inside).

    Subclasses implement ``sdf`` for (..., 3) point arrays and expose an
    axis-aligned bounding box (lo, hi).
    """

    bbox_lo: np.ndarray
    bbox_hi: np.ndarray

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def marching_cubes(occ: VolumeGrid, iso: float) -> TriMesh:
    """Extract the iso surface of a voxel grid as a triangle mesh.

    Standard 256-case tables with linear edge interpolation; values above
    ``iso`` count as inside. An all-below or all-above grid yields an empty
    mesh.
    """
    vals = occ.values
    if min(vals.shape) < 2:
        raise InvalidArgument("marching cubes needs at least 2 voxels per axis")
    dzv, dyv, dxv = vals.shape
    below = vals < iso
    ncz, ncy, ncx = dzv - 1, dyv - 1, dxv - 1
    cidx = np.zeros((ncz, ncy, ncx), dtype=np.int32)
    for i in range(8):
        ox, oy, oz = CORNER_OFFSETS[i]
        cidx |= below[oz:oz + ncz, oy:oy + ncy, ox:ox + ncx].astype(np.int32) << i
    az, ay, ax = np.nonzero(EDGE_TABLE[cidx] != 0)
    if az.size == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    rows = TRI_TABLE[cidx[az, ay, ax]]
    cell_i, slot_i = np.nonzero(rows >= 0)
    local_e = rows[cell_i, slot_i].astype(np.int64)
    anchor = EDGE_ANCHOR[local_e]
    bx = ax[cell_i] + anchor[:, 0]
    by = ay[cell_i] + anchor[:, 1]
    bz = az[cell_i] + anchor[:, 2]
    axis = anchor[:, 3]
    gid = ((bz * dyv + by) * dxv + bx) * 3 + axis

    uniq, first_idx, inverse = np.unique(gid, return_index=True, return_inverse=True)
    order = np.argsort(first_idx, kind="stable")  # first-emission order
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[order] = np.arange(uniq.size)
    triangles = rank[inverse].reshape(-1, 3)

    ugid = uniq[order]
    uaxis = ugid % 3
    rest = ugid // 3
    ubx = rest % dxv
    rest //= dxv
    uby = rest % dyv
    ubz = rest // dyv
    f0 = vals[ubz, uby, ubx].astype(np.float64)
    sx = (uaxis == 0).astype(np.int64)
    sy = (uaxis == 1).astype(np.int64)
    sz = (uaxis == 2).astype(np.int64)
    f1 = vals[ubz + sz, uby + sy, ubx + sx].astype(np.float64)
    denom = f1 - f0
    t = np.where(denom != 0.0, (iso - f0) / np.where(denom != 0.0, denom, 1.0), 0.5)
    np.clip(t, 0.0, 1.0, out=t)
    voxel_pos = np.stack([ubx + t * sx, uby + t * sy, ubz + t * sz], axis=1)
    verts = np.asarray(occ.origin) + voxel_pos * np.asarray(occ.spacing)
    return TriMesh(verts, triangles)


def mesh_is_closed(m: TriMesh) -> bool:
    """True iff every undirected edge is shared by exactly two triangles."""
    if m.is_empty():
        return False
    t = m.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool((counts == 2).all())


def smooth_mesh(m: TriMesh, iterations: int, lam: float) -> TriMesh:
    """Iterative Laplacian smoothing toward the 1-ring centroid.

    Each pass moves every vertex by ``lam`` of the way to the mean of its
    distinct neighbours; connectivity is unchanged.
    """
    if iterations < 0:
        raise InvalidArgument("iterations must be >= 0")
    if not (0.0 < lam <= 1.0):
        raise InvalidArgument(f"lambda must be in (0, 1], got {lam}")
    if iterations == 0 or m.is_empty():
        return m
    t = m.triangles
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    counts = np.bincount(src, minlength=m.n_vertices).astype(np.float64)
    counts[counts == 0] = 1.0  # isolated vertices stay put
    verts = m.vertices.copy()
    for _ in range(iterations):
        acc = np.zeros_like(verts)
        np.add.at(acc, src, verts[dst])
        centroid = acc / counts[:, None]
        verts += lam * (centroid - verts)
    return TriMesh(verts, t)


def triangle_areas(m: TriMesh) -> np.ndarray:
    a = m.vertices[m.triangles[:, 0]]
    b = m.vertices[m.triangles[:, 1]]
    c = m.vertices[m.triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def signed_volume(m: TriMesh) -> float:
    """Signed enclosed volume; positive for outward-oriented closed meshes."""
    a = m.vertices[m.triangles[:, 0]]
    b = m.vertices[m.triangles[:, 1]]
    c = m.vertices[m.triangles[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def sample_surface_points(
    m: TriMesh,
    n: int,
    sigmas: list[tuple[float, float]],
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw ``n`` area-uniform surface points, jittered by Gaussian offsets.

    ``sigmas`` is a list of (fraction, sigma) partitions; fractions must sum
    to 1. Sigma 0 leaves points exactly on the surface. Units follow the
    mesh coordinates (scene meshes live in the normalized [-1, 1] frame).
    """
    if m.is_empty():
        raise InvalidArgument("cannot sample points from an empty mesh")
    fracs = np.array([f for f, _ in sigmas], dtype=np.float64)
    if abs(fracs.sum() - 1.0) > 1e-9:
        raise InvalidArgument(f"sigma fractions must sum to 1, got {fracs.sum()}")
    areas = triangle_areas(m)
    total = areas.sum()
    if total <= 0:
        raise InvalidArgument("mesh has zero total area")
    probs = areas / total
    bounds = np.round(np.cumsum(fracs) * n).astype(np.int64)
    counts = np.diff(np.concatenate([[0], bounds]))
    chunks = []
    for (_, sigma), cnt in zip(sigmas, counts):
        cnt = int(cnt)
        if cnt == 0:
            continue
        tri = rng.choice(len(areas), size=cnt, p=probs)
        u = rng.random(cnt)
        v = rng.random(cnt)
        flip = u + v > 1.0
        u[flip] = 1.0 - u[flip]
        v[flip] = 1.0 - v[flip]
        a = m.vertices[m.triangles[tri, 0]]
        b = m.vertices[m.triangles[tri, 1]]
        c = m.vertices[m.triangles[tri, 2]]
        pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
        if sigma > 0:
            pts = pts + rng.normal(0.0, sigma, size=pts.shape)
        chunks.append(pts)
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def point_occupancy(obj: "ImplicitShape | TriMesh", points: np.ndarray) -> np.ndarray:
    """0/1 containment labels for points against a shape or closed mesh.

    Points exactly on the surface are labeled outside (strict sdf < 0); the
    mesh variant uses ray-parity with jittered re-casts on grazing hits.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if isinstance(obj, TriMesh):
        if not mesh_is_closed(obj):
            raise TopologyError("point_occupancy requires a closed mesh")
        return kernels.ray_parity_inside(obj.vertices, obj.triangles, pts)
    return (np.asarray(obj.sdf(pts)) < 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# OBJ I/O (ASCII, v/f records only, 1-based indices)
# ---------------------------------------------------------------------------

def save_obj(path: str | Path, m: TriMesh, comment: str | None = None) -> None:
    lines = []
    if comment:
        lines.append(f"# {comment}")
    for v in m.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for t in m.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path: str | Path) -> TriMesh:
    verts = []
    tris = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(tris, dtype=np.int64).reshape(-1, 3),
    )
