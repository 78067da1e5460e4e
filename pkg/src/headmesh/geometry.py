"""Point/segment versus triangle-soup kernels (numba-compiled).

The solid-angle sum uses the Van Oosterom-Strackee closed form per triangle,
so the enclosure ratio of a closed polyhedral surface is exact up to rounding.
Segment and distance queries go through a uniform grid over triangle bounding
boxes.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor

import numba
import numpy as np

FOUR_PI = 4.0 * math.pi


@numba.njit(cache=True, nogil=True, fastmath=False)
def _solid_angle_kernel(points, tri, out):
    n = points.shape[0]
    m = tri.shape[0]
    for i in range(n):
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        acc = 0.0
        for t in range(m):
            ax = tri[t, 0, 0] - px
            ay = tri[t, 0, 1] - py
            az = tri[t, 0, 2] - pz
            bx = tri[t, 1, 0] - px
            by = tri[t, 1, 1] - py
            bz = tri[t, 1, 2] - pz
            cx = tri[t, 2, 0] - px
            cy = tri[t, 2, 1] - py
            cz = tri[t, 2, 2] - pz
            la = math.sqrt(ax * ax + ay * ay + az * az)
            lb = math.sqrt(bx * bx + by * by + bz * bz)
            lc = math.sqrt(cx * cx + cy * cy + cz * cz)
            det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
            den = (
                la * lb * lc
                + (ax * bx + ay * by + az * bz) * lc
                + (ax * cx + ay * cy + az * cz) * lb
                + (bx * cx + by * cy + bz * cz) * la
            )
            acc += 2.0 * math.atan2(det, den)
        out[i] = acc


def solid_angle_ratio(points, triangles_xyz, workers: int = 1, chunk: int = 2048) -> np.ndarray:
    """Sum of signed solid angles over ``4*pi`` for every point.

    ``triangles_xyz`` is a ``(T, 3, 3)`` array of corner positions wound
    outward. The result is 1 inside a closed surface and 0 outside. Work is
    split into fixed point chunks, so the values do not depend on ``workers``.
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    tri = np.ascontiguousarray(np.asarray(triangles_xyz, dtype=float).reshape(-1, 3, 3))
    out = np.zeros(len(pts))
    if len(pts) == 0 or len(tri) == 0:
        return out
    bounds = [(s, min(s + chunk, len(pts))) for s in range(0, len(pts), chunk)]

    def run(b):
        _solid_angle_kernel(pts[b[0]:b[1]], tri, out[b[0]:b[1]])

    if workers <= 1 or len(bounds) == 1:
        for b in bounds:
            run(b)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, bounds))
    return out / FOUR_PI


@numba.njit(cache=True, nogil=True)
def _closest_on_triangle(p, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w


@numba.njit(cache=True, nogil=True, inline="always")
def _segment_triangle(ox, oy, oz, dx, dy, dz, tri, t):
    """Moller-Trumbore on triangle ``t``; returns the ray parameter of the hit or -1."""
    ax = tri[t, 0, 0]
    ay = tri[t, 0, 1]
    az = tri[t, 0, 2]
    e1x = tri[t, 1, 0] - ax
    e1y = tri[t, 1, 1] - ay
    e1z = tri[t, 1, 2] - az
    e2x = tri[t, 2, 0] - ax
    e2y = tri[t, 2, 1] - ay
    e2z = tri[t, 2, 2] - az
    pvx = dy * e2z - dz * e2y
    pvy = dz * e2x - dx * e2z
    pvz = dx * e2y - dy * e2x
    det = e1x * pvx + e1y * pvy + e1z * pvz
    if abs(det) < 1e-14:
        return -1.0
    inv = 1.0 / det
    tx = ox - ax
    ty = oy - ay
    tz = oz - az
    u = (tx * pvx + ty * pvy + tz * pvz) * inv
    if u < -1e-12 or u > 1.0 + 1e-12:
        return -1.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -1e-12 or u + v > 1.0 + 1e-12:
        return -1.0
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@numba.njit(cache=True, nogil=True)
def _grid_segments(starts, ends, tri, lo, g, dims, offsets, items, out):
    c0 = np.empty(3, np.int64)
    c1 = np.empty(3, np.int64)
    for s in range(starts.shape[0]):
        ox = starts[s, 0]
        oy = starts[s, 1]
        oz = starts[s, 2]
        dx = ends[s, 0] - ox
        dy = ends[s, 1] - oy
        dz = ends[s, 2] - oz
        best = 2.0
        skip = False
        for k in range(3):
            a = (min(starts[s, k], ends[s, k]) - lo[k]) / g
            b = (max(starts[s, k], ends[s, k]) - lo[k]) / g
            if b < 0 or a >= dims[k]:
                skip = True
            c0[k] = max(0, int(math.floor(a)))
            c1[k] = min(dims[k] - 1, int(math.floor(b)))
        if skip:
            out[s] = -1.0
            continue
        for i in range(c0[0], c1[0] + 1):
            for j in range(c0[1], c1[1] + 1):
                for k in range(c0[2], c1[2] + 1):
                    cell = i + dims[0] * (j + dims[1] * k)
                    for q in range(offsets[cell], offsets[cell + 1]):
                        h = _segment_triangle(ox, oy, oz, dx, dy, dz, tri, items[q])
                        if h > 1e-12 and h <= 1.0 + 1e-12 and h < best:
                            best = h
        out[s] = best if best <= 1.0 + 1e-12 else -1.0


@numba.njit(cache=True, nogil=True)
def _grid_distances(points, tri, lo, g, dims, offsets, items, out):
    maxr = max(dims[0], max(dims[1], dims[2]))
    for s in range(points.shape[0]):
        p = points[s]
        ci = np.empty(3, np.int64)
        for k in range(3):
            x = (p[k] - lo[k]) / g
            c = int(math.floor(x))
            if c < 0:
                c = 0
            elif c >= dims[k]:
                c = dims[k] - 1
            ci[k] = c
        best = np.inf
        r = 0
        while r <= maxr:
            for i in range(ci[0] - r, ci[0] + r + 1):
                if i < 0 or i >= dims[0]:
                    continue
                for j in range(ci[1] - r, ci[1] + r + 1):
                    if j < 0 or j >= dims[1]:
                        continue
                    for k in range(ci[2] - r, ci[2] + r + 1):
                        if k < 0 or k >= dims[2]:
                            continue
                        if max(abs(i - ci[0]), max(abs(j - ci[1]), abs(k - ci[2]))) != r:
                            continue
                        cell = i + dims[0] * (j + dims[1] * k)
                        for q in range(offsets[cell], offsets[cell + 1]):
                            t = items[q]
                            cp = _closest_on_triangle(p, tri[t, 0], tri[t, 1], tri[t, 2])
                            dd = math.sqrt(((cp - p) ** 2).sum())
                            if dd < best:
                                best = dd
            # unvisited triangles lie at least r*g away from p
            if best <= r * g:
                break
            r += 1
        out[s] = best


class TriangleGrid:
    """Uniform bucket grid over triangle bounding boxes."""

    def __init__(self, triangles_xyz: np.ndarray, cell: float | None = None):
        tri = np.ascontiguousarray(np.asarray(triangles_xyz, dtype=float).reshape(-1, 3, 3))
        if len(tri) == 0:
            raise ValueError("empty triangle set")
        self.tri = tri
        tmin = tri.min(axis=1)
        tmax = tri.max(axis=1)
        if cell is None:
            ext = np.linalg.norm(tmax - tmin, axis=1)
            cell = max(float(np.median(ext)) * 0.5, 1e-9)
        self.g = float(cell)
        self.lo = tmin.min(axis=0) - 1e-9
        hi = tmax.max(axis=0) + 1e-9
        self.dims = np.maximum(1, np.ceil((hi - self.lo) / self.g).astype(np.int64))
        c0 = np.clip(np.floor((tmin - self.lo) / self.g).astype(np.int64), 0, self.dims - 1)
        c1 = np.clip(np.floor((tmax - self.lo) / self.g).astype(np.int64), 0, self.dims - 1)
        cells: list[np.ndarray] = []
        owners: list[np.ndarray] = []
        span = c1 - c0 + 1
        for dx in range(int(span[:, 0].max())):
            for dy in range(int(span[:, 1].max())):
                for dz in range(int(span[:, 2].max())):
                    ok = (dx < span[:, 0]) & (dy < span[:, 1]) & (dz < span[:, 2])
                    idx = np.flatnonzero(ok)
                    c = c0[idx] + np.array([dx, dy, dz])
                    cells.append(c[:, 0] + self.dims[0] * (c[:, 1] + self.dims[1] * c[:, 2]))
                    owners.append(idx)
        cell_id = np.concatenate(cells)
        owner = np.concatenate(owners)
        order = np.lexsort((owner, cell_id))
        self.items = owner[order].astype(np.int64)
        n_cells = int(np.prod(self.dims))
        self.offsets = np.searchsorted(cell_id[order], np.arange(n_cells + 1)).astype(np.int64)

    def first_hit(self, starts, ends) -> np.ndarray:
        """Fraction ``t`` in (0, 1] of the first crossing along each segment, ``-1`` for none."""
        starts = np.ascontiguousarray(np.asarray(starts, dtype=float).reshape(-1, 3))
        ends = np.ascontiguousarray(np.asarray(ends, dtype=float).reshape(-1, 3))
        out = np.empty(len(starts))
        if len(starts):
            _grid_segments(starts, ends, self.tri, self.lo, self.g, self.dims, self.offsets, self.items, out)
        return out

    def distance(self, points) -> np.ndarray:
        """Unsigned distance from each point to the triangle set."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        out = np.empty(len(pts))
        if len(pts):
            _grid_distances(pts, self.tri, self.lo, self.g, self.dims, self.offsets, self.items, out)
        return out


def brute_force_distance(points, triangles_xyz) -> np.ndarray:
    """Reference point-to-triangle-set distance (no acceleration)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = np.asarray(triangles_xyz, dtype=float).reshape(-1, 3, 3)
    out = np.empty(len(pts))
    for i, p in enumerate(pts):
        out[i] = min(np.linalg.norm(_closest_on_triangle(p, t[0], t[1], t[2]) - p) for t in tri)
    return out
