"""Numba @njit implementations of the hot kernels.

Same function surface as ``_kernels_numpy``. All kernels are sequential and
allocation-light; results are deterministic for fixed inputs regardless of
thread settings.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from ._kernels_numpy import RAY_DIRECTIONS, _EPS_BARY, _EPS_DET, _EPS_T


# ---------------------------------------------------------------------------
# trilinear interpolation
# ---------------------------------------------------------------------------

@njit(cache=True)
def _trilinear_gather(grid, pts, out):
    C, D, H, W = grid.shape
    P = pts.shape[0]
    for p in range(P):
        vx = ((pts[p, 0] + 1.0) * W - 1.0) * 0.5
        vy = ((pts[p, 1] + 1.0) * H - 1.0) * 0.5
        vz = ((pts[p, 2] + 1.0) * D - 1.0) * 0.5
        ix = int(np.floor(vx))
        iy = int(np.floor(vy))
        iz = int(np.floor(vz))
        fx = vx - ix
        fy = vy - iy
        fz = vz - iz
        x0 = min(max(ix, 0), W - 1)
        x1 = min(max(ix + 1, 0), W - 1)
        y0 = min(max(iy, 0), H - 1)
        y1 = min(max(iy + 1, 0), H - 1)
        z0 = min(max(iz, 0), D - 1)
        z1 = min(max(iz + 1, 0), D - 1)
        w000 = (1.0 - fz) * (1.0 - fy) * (1.0 - fx)
        w001 = (1.0 - fz) * (1.0 - fy) * fx
        w010 = (1.0 - fz) * fy * (1.0 - fx)
        w011 = (1.0 - fz) * fy * fx
        w100 = fz * (1.0 - fy) * (1.0 - fx)
        w101 = fz * (1.0 - fy) * fx
        w110 = fz * fy * (1.0 - fx)
        w111 = fz * fy * fx
        for c in range(C):
            acc = (
                w000 * grid[c, z0, y0, x0]
                + w001 * grid[c, z0, y0, x1]
                + w010 * grid[c, z0, y1, x0]
                + w011 * grid[c, z0, y1, x1]
                + w100 * grid[c, z1, y0, x0]
                + w101 * grid[c, z1, y0, x1]
                + w110 * grid[c, z1, y1, x0]
                + w111 * grid[c, z1, y1, x1]
            )
            out[c, p] = acc


def trilinear_gather(grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    out = np.empty((grid.shape[0], pts.shape[0]), dtype=grid.dtype)
    _trilinear_gather(grid, np.ascontiguousarray(pts, dtype=np.float64), out)
    return out


@njit(cache=True)
def _trilinear_scatter(ggrid, pts, gout):
    C, D, H, W = ggrid.shape
    P = pts.shape[0]
    for p in range(P):
        vx = ((pts[p, 0] + 1.0) * W - 1.0) * 0.5
        vy = ((pts[p, 1] + 1.0) * H - 1.0) * 0.5
        vz = ((pts[p, 2] + 1.0) * D - 1.0) * 0.5
        ix = int(np.floor(vx))
        iy = int(np.floor(vy))
        iz = int(np.floor(vz))
        fx = vx - ix
        fy = vy - iy
        fz = vz - iz
        x0 = min(max(ix, 0), W - 1)
        x1 = min(max(ix + 1, 0), W - 1)
        y0 = min(max(iy, 0), H - 1)
        y1 = min(max(iy + 1, 0), H - 1)
        z0 = min(max(iz, 0), D - 1)
        z1 = min(max(iz + 1, 0), D - 1)
        for c in range(C):
            g = gout[c, p]
            ggrid[c, z0, y0, x0] += g * ((1.0 - fz) * (1.0 - fy) * (1.0 - fx))
            ggrid[c, z0, y0, x1] += g * ((1.0 - fz) * (1.0 - fy) * fx)
            ggrid[c, z0, y1, x0] += g * ((1.0 - fz) * fy * (1.0 - fx))
            ggrid[c, z0, y1, x1] += g * ((1.0 - fz) * fy * fx)
            ggrid[c, z1, y0, x0] += g * (fz * (1.0 - fy) * (1.0 - fx))
            ggrid[c, z1, y0, x1] += g * (fz * (1.0 - fy) * fx)
            ggrid[c, z1, y1, x0] += g * (fz * fy * (1.0 - fx))
            ggrid[c, z1, y1, x1] += g * (fz * fy * fx)


def trilinear_scatter_add(ggrid: np.ndarray, pts: np.ndarray, gout: np.ndarray) -> None:
    _trilinear_scatter(ggrid, np.ascontiguousarray(pts, dtype=np.float64), gout)


# ---------------------------------------------------------------------------
# 3x3x3 convolution
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _conv3d_forward_padded(xp, w, b, out):
    N, K, D, H, W = out.shape
    C = xp.shape[1]
    for n in range(N):
        for k in range(K):
            for z in range(D):
                for y in range(H):
                    for x in range(W):
                        out[n, k, z, y, x] = b[k]
            for c in range(C):
                for dz in range(3):
                    for dy in range(3):
                        for dx in range(3):
                            wv = w[k, c, dz, dy, dx]
                            if wv == 0.0:
                                continue
                            for z in range(D):
                                for y in range(H):
                                    row_in = xp[n, c, z + dz, y + dy]
                                    row_out = out[n, k, z, y]
                                    for x in range(W):
                                        row_out[x] += wv * row_in[x + dx]


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    N, C, D, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.empty((N, w.shape[0], D, H, W), dtype=x.dtype)
    _conv3d_forward_padded(xp, w, b, out)
    return out


@njit(cache=True, fastmath=True)
def _conv3d_grad_weight_padded(xp, gout, gw):
    N, K, D, H, W = gout.shape
    C = xp.shape[1]
    for k in range(K):
        for c in range(C):
            for dz in range(3):
                for dy in range(3):
                    for dx in range(3):
                        acc = 0.0
                        for n in range(N):
                            for z in range(D):
                                for y in range(H):
                                    row_g = gout[n, k, z, y]
                                    row_x = xp[n, c, z + dz, y + dy]
                                    for x in range(W):
                                        acc += row_g[x] * row_x[x + dx]
                        gw[k, c, dz, dy, dx] = acc


def conv3d_grad_weight(x: np.ndarray, gout: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    gw = np.empty((gout.shape[1], x.shape[1], 3, 3, 3), dtype=x.dtype)
    _conv3d_grad_weight_padded(xp, gout, gw)
    return gw


# ---------------------------------------------------------------------------
# ray-parity point containment
# ---------------------------------------------------------------------------

@njit(cache=True)
def _ray_parity(v0, e1, e2, nrm, nlen, pts, dirs, scale, out):
    P = pts.shape[0]
    T = v0.shape[0]
    J = dirs.shape[0]
    eps_t = _EPS_T * scale
    for i in range(P):
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        result = 0
        for j in range(J):
            dx, dy, dz = dirs[j, 0], dirs[j, 1], dirs[j, 2]
            crossings = 0
            suspect = False
            for t in range(T):
                e2x, e2y, e2z = e2[t, 0], e2[t, 1], e2[t, 2]
                e1x, e1y, e1z = e1[t, 0], e1[t, 1], e1[t, 2]
                # pvec = d x e2
                pvx = dy * e2z - dz * e2y
                pvy = dz * e2x - dx * e2z
                pvz = dx * e2y - dy * e2x
                det = e1x * pvx + e1y * pvy + e1z * pvz
                tvx = px - v0[t, 0]
                tvy = py - v0[t, 1]
                tvz = pz - v0[t, 2]
                if abs(det) <= _EPS_DET:
                    pd = abs(tvx * nrm[t, 0] + tvy * nrm[t, 1] + tvz * nrm[t, 2])
                    if pd < _EPS_BARY * scale * max(nlen[t], _EPS_DET):
                        suspect = True
                        break
                    continue
                u = (tvx * pvx + tvy * pvy + tvz * pvz) / det
                if u < -_EPS_BARY or u > 1.0 + _EPS_BARY:
                    continue
                # qvec = tvec x e1
                qvx = tvy * e1z - tvz * e1y
                qvy = tvz * e1x - tvx * e1z
                qvz = tvx * e1y - tvy * e1x
                v = (dx * qvx + dy * qvy + dz * qvz) / det
                if v < -_EPS_BARY or u + v > 1.0 + _EPS_BARY:
                    continue
                tt = (e2x * qvx + e2y * qvy + e2z * qvz) / det
                if tt <= eps_t:
                    continue
                if u < _EPS_BARY or v < _EPS_BARY or u + v > 1.0 - _EPS_BARY or tt < 2 * eps_t:
                    suspect = True
                    break
                crossings += 1
            if not suspect:
                result = crossings & 1
                break
            if j == J - 1:
                result = crossings & 1
        out[i] = result


def ray_parity_inside(verts: np.ndarray, tris: np.ndarray, pts: np.ndarray) -> np.ndarray:
    out = np.zeros(pts.shape[0], dtype=np.uint8)
    if len(tris) == 0 or pts.shape[0] == 0:
        return out
    v0 = np.ascontiguousarray(verts[tris[:, 0]], dtype=np.float64)
    e1 = np.ascontiguousarray(verts[tris[:, 1]] - verts[tris[:, 0]], dtype=np.float64)
    e2 = np.ascontiguousarray(verts[tris[:, 2]] - verts[tris[:, 0]], dtype=np.float64)
    nrm = np.cross(e1, e2)
    nlen = np.sqrt((nrm * nrm).sum(axis=1))
    scale = max(float(np.abs(verts).max()), 1.0)
    _ray_parity(
        v0, e1, e2, nrm, nlen,
        np.ascontiguousarray(pts, dtype=np.float64),
        RAY_DIRECTIONS, scale, out,
    )
    return out


# ---------------------------------------------------------------------------
# nearest-neighbour distances via a 32^3 spatial hash with expanding-ring
# search (exact: rings grow until no closer cell can exist)
# ---------------------------------------------------------------------------

_HASH_RES = 32


@njit(cache=True)
def _nn_query(sorted_pts, starts, lo, h, query, out):
    G = _HASH_RES
    P = query.shape[0]
    for i in range(P):
        qx, qy, qz = query[i, 0], query[i, 1], query[i, 2]
        cx = int(np.floor((qx - lo[0]) / h))
        cy = int(np.floor((qy - lo[1]) / h))
        cz = int(np.floor((qz - lo[2]) / h))
        best = np.inf
        r_cover = max(
            max(abs(cx), abs(G - 1 - cx)),
            max(abs(cy), abs(G - 1 - cy)),
            max(abs(cz), abs(G - 1 - cz)),
        )
        r = 0
        while r <= r_cover:
            # scan the Chebyshev shell at radius r
            for dz in range(-r, r + 1):
                gz = cz + dz
                if gz < 0 or gz >= G:
                    continue
                rim = abs(dz) == r
                for dy in range(-r, r + 1):
                    gy = cy + dy
                    if gy < 0 or gy >= G:
                        continue
                    if rim or abs(dy) == r:
                        step = 1
                    else:
                        step = 2 * r if r > 0 else 1
                    dx = -r
                    while dx <= r:
                        gx = cx + dx
                        if 0 <= gx < G:
                            cell = (gz * G + gy) * G + gx
                            for s in range(starts[cell], starts[cell + 1]):
                                ddx = sorted_pts[s, 0] - qx
                                ddy = sorted_pts[s, 1] - qy
                                ddz = sorted_pts[s, 2] - qz
                                d2 = ddx * ddx + ddy * ddy + ddz * ddz
                                if d2 < best:
                                    best = d2
                        dx += step
            # any unvisited point sits in a cell at Chebyshev distance > r,
            # hence at Euclidean distance >= r*h from the query
            if best <= (r * h) * (r * h):
                break
            r += 1
        out[i] = np.sqrt(best)


def nn_dists(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    lo = ref.min(axis=0)
    hi = ref.max(axis=0)
    extent = float((hi - lo).max())
    if extent == 0.0:
        return np.sqrt(((query - lo) ** 2).sum(axis=1))
    h = extent / _HASH_RES
    cell = np.floor((ref - lo) / h).astype(np.int64)
    np.clip(cell, 0, _HASH_RES - 1, out=cell)
    cid = (cell[:, 2] * _HASH_RES + cell[:, 1]) * _HASH_RES + cell[:, 0]
    order = np.argsort(cid, kind="stable")
    counts = np.bincount(cid, minlength=_HASH_RES ** 3)
    starts = np.zeros(_HASH_RES ** 3 + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    out = np.empty(query.shape[0], dtype=np.float64)
    _nn_query(np.ascontiguousarray(ref[order]), starts, lo, h, query, out)
    return out
