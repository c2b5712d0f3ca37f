"""Vectorized numpy implementations of the hot kernels.

Mirrors the function surface of ``_kernels_numba``; ``kernels`` picks one
per family based on the backend. Convolutions run through BLAS
(tensordot), gathers/scatters through fancy indexing, nearest-neighbour
queries through a cKD-tree.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# trilinear interpolation (voxel-center convention, clamp-to-edge)
# ---------------------------------------------------------------------------

def _corner_setup(pts: np.ndarray, dims_zyx: tuple[int, int, int]):
    """Corner indices and fractional weights for trilinear interpolation.

    ``pts`` is (P, 3) in normalized (x, y, z) coordinates; voxel center i of
    an axis with D voxels sits at (2i+1)/D - 1. Coordinates are mapped in
    float64 so that power-of-two center queries land exactly on the lattice.
    """
    D, H, W = dims_zyx
    v = np.empty((3, pts.shape[0]), dtype=np.float64)
    for axis, n in ((0, W), (1, H), (2, D)):
        v[axis] = ((pts[:, axis].astype(np.float64) + 1.0) * n - 1.0) * 0.5
    i0 = np.floor(v).astype(np.int64)
    f = v - i0
    lo = np.empty_like(i0)
    hi = np.empty_like(i0)
    for axis, n in ((0, W), (1, H), (2, D)):
        np.clip(i0[axis], 0, n - 1, out=lo[axis])
        np.clip(i0[axis] + 1, 0, n - 1, out=hi[axis])
    return lo, hi, f


def trilinear_gather(grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample ``grid`` (C, D, H, W) at ``pts`` (P, 3); returns (C, P)."""
    C, D, H, W = grid.shape
    lo, hi, f = _corner_setup(pts, (D, H, W))
    fx, fy, fz = f
    gx0, gx1 = (1.0 - fx), fx
    gy0, gy1 = (1.0 - fy), fy
    gz0, gz1 = (1.0 - fz), fz
    out = np.zeros((C, pts.shape[0]), dtype=np.float64)
    for zi, wz in ((lo[2], gz0), (hi[2], gz1)):
        for yi, wy in ((lo[1], gy0), (hi[1], gy1)):
            for xi, wx in ((lo[0], gx0), (hi[0], gx1)):
                out += grid[:, zi, yi, xi] * (wz * wy * wx)
    return out.astype(grid.dtype, copy=False)


def trilinear_scatter_add(ggrid: np.ndarray, pts: np.ndarray, gout: np.ndarray) -> None:
    """Accumulate d(out)/d(grid) contributions into ``ggrid`` in place.

    ``ggrid`` is (C, D, H, W), ``gout`` is (C, P).
    """
    C, D, H, W = ggrid.shape
    lo, hi, f = _corner_setup(pts, (D, H, W))
    fx, fy, fz = f
    flat = ggrid.reshape(C, D * H * W)
    crow = np.arange(C)[:, None]
    for zi, wz in ((lo[2], 1.0 - fz), (hi[2], fz)):
        for yi, wy in ((lo[1], 1.0 - fy), (hi[1], fy)):
            for xi, wx in ((lo[0], 1.0 - fx), (hi[0], fx)):
                lin = (zi * H + yi) * W + xi
                contrib = gout * (wz * wy * wx)
                np.add.at(flat, (crow, lin[None, :]), contrib.astype(ggrid.dtype, copy=False))


# ---------------------------------------------------------------------------
# 3x3x3 convolution, stride 1, zero padding 1 (cross-correlation)
# ---------------------------------------------------------------------------

def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x (N,C,D,H,W), w (K,C,3,3,3), b (K) -> (N,K,D,H,W)."""
    N, C, D, H, W = x.shape
    K = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((N, K, D, H, W), dtype=x.dtype)
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                xs = xp[:, :, dz:dz + D, dy:dy + H, dx:dx + W]
                # (K,C) x (N,C,D,H,W) -> (K,N,D,H,W)
                part = np.tensordot(w[:, :, dz, dy, dx], xs, axes=([1], [1]))
                out += part.transpose(1, 0, 2, 3, 4)
    out += b.reshape(1, K, 1, 1, 1)
    return out


def conv3d_grad_weight(x: np.ndarray, gout: np.ndarray) -> np.ndarray:
    """Gradient of conv3d_forward w.r.t. the weight tensor."""
    N, C, D, H, W = x.shape
    K = gout.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    gw = np.empty((K, C, 3, 3, 3), dtype=x.dtype)
    for dz in range(3):
        for dy in range(3):
            for dx in range(3):
                xs = xp[:, :, dz:dz + D, dy:dy + H, dx:dx + W]
                gw[:, :, dz, dy, dx] = np.tensordot(
                    gout, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
    return gw


# ---------------------------------------------------------------------------
# ray-parity point containment
# ---------------------------------------------------------------------------

# Fixed fallback ray directions: arbitrary unit vectors away from lattice
# axes so grid-aligned meshes do not produce grazing hits on the first try.
RAY_DIRECTIONS = np.array(
    [
        [0.5381290, 0.7201962, 0.4383125],
        [-0.2817325, 0.8514201, 0.4424837],
        [0.7642458, -0.1932186, 0.6152325],
        [-0.5519428, -0.4172355, 0.7218821],
        [0.1513221, 0.5123184, -0.8453519],
        [-0.8112719, 0.2159221, -0.5434781],
        [0.4127395, -0.7825113, -0.4663528],
        [-0.0912355, -0.3561224, 0.9299719],
    ],
    dtype=np.float64,
)
RAY_DIRECTIONS /= np.linalg.norm(RAY_DIRECTIONS, axis=1, keepdims=True)

_EPS_DET = 1e-12
_EPS_BARY = 1e-9
_EPS_T = 1e-9


def ray_parity_inside(verts: np.ndarray, tris: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Inside/outside labels (uint8) for ``pts`` against a closed mesh.

    Casts a ray per point and counts crossings (Moller-Trumbore); a hit too
    close to a triangle edge, vertex, or plane is treated as unreliable and
    the point is re-cast along the next fallback direction.
    """
    v0 = verts[tris[:, 0]]
    e1 = verts[tris[:, 1]] - v0
    e2 = verts[tris[:, 2]] - v0
    nrm = np.cross(e1, e2)
    nlen = np.linalg.norm(nrm, axis=1)
    scale = max(float(np.abs(verts).max()), 1.0) if len(verts) else 1.0

    P = pts.shape[0]
    out = np.zeros(P, dtype=np.uint8)
    pending = np.arange(P)
    chunk = max(1, int(2_000_000 // max(len(tris), 1)))
    for j, d in enumerate(RAY_DIRECTIONS):
        if pending.size == 0:
            break
        last = j == len(RAY_DIRECTIONS) - 1
        pvec = np.cross(d, e2)
        det = np.einsum("tj,tj->t", e1, pvec)
        ok = np.abs(det) > _EPS_DET
        det_safe = np.where(ok, det, 1.0)
        next_pending = []
        for s in range(0, pending.size, chunk):
            idx = pending[s:s + chunk]
            p = pts[idx]
            tvec = p[:, None, :] - v0[None, :, :]
            u = np.einsum("btj,tj->bt", tvec, pvec) / det_safe
            qvec = np.cross(tvec, e1[None, :, :])
            v = (qvec @ d) / det_safe
            t = np.einsum("btj,tj->bt", qvec, e2) / det_safe
            hit = ok & (u >= -_EPS_BARY) & (v >= -_EPS_BARY) & (u + v <= 1.0 + _EPS_BARY) & (t > _EPS_T * scale)
            near_edge = hit & (
                (u < _EPS_BARY) | (v < _EPS_BARY) | (u + v > 1.0 - _EPS_BARY) | (t < 2 * _EPS_T * scale)
            )
            # near-parallel triangle whose plane almost contains the ray origin
            plane_dist = np.abs(np.einsum("btj,tj->bt", tvec, nrm))
            grazing = (~ok) & (plane_dist < _EPS_BARY * scale * np.maximum(nlen, _EPS_DET))
            suspect = near_edge.any(axis=1) | grazing.any(axis=1)
            clean = ~suspect
            crossings = (hit & ~near_edge).sum(axis=1)
            out[idx[clean]] = (crossings[clean] % 2).astype(np.uint8)
            if last:
                out[idx[suspect]] = (crossings[suspect] % 2).astype(np.uint8)
            else:
                next_pending.append(idx[suspect])
        pending = np.concatenate(next_pending) if next_pending else np.empty(0, dtype=np.int64)
    return out


# ---------------------------------------------------------------------------
# nearest-neighbour distances
# ---------------------------------------------------------------------------

def nn_dists(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Euclidean distance from every query point to its nearest ref point."""
    from scipy.spatial import cKDTree

    d, _ = cKDTree(ref).query(query)
    return np.asarray(d, dtype=np.float64)
