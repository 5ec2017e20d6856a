"""Exact point-to-triangle-mesh distance with a median-split AABB tree.

Kernels are compiled with numba; all of them are pure per-query loops, so the
results do not depend on how work is split.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .mesh import TriangleMesh

LEAF_SIZE = 2


@njit(cache=True)
def _seg_sq(px, py, pz, ax, ay, az, bx, by, bz):
    ex, ey, ez = bx - ax, by - ay, bz - az
    wx, wy, wz = px - ax, py - ay, pz - az
    ee = ex * ex + ey * ey + ez * ez
    t = 0.0
    if ee > 0.0:
        t = (wx * ex + wy * ey + wz * ez) / ee
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    dx, dy, dz = wx - t * ex, wy - t * ey, wz - t * ez
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _tri_sq(p, a, b, c):
    """Squared distance from p to the closed triangle abc (Ericson's region walk)."""
    px, py, pz = p[0], p[1], p[2]
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    nx = aby * acz - abz * acy
    ny = abz * acx - abx * acz
    nz = abx * acy - aby * acx
    nn = nx * nx + ny * ny + nz * nz
    scale = (abx * abx + aby * aby + abz * abz) * (acx * acx + acy * acy + acz * acz)
    if nn <= 1e-24 * scale or nn == 0.0:
        d0 = _seg_sq(px, py, pz, a[0], a[1], a[2], b[0], b[1], b[2])
        d1 = _seg_sq(px, py, pz, b[0], b[1], b[2], c[0], c[1], c[2])
        d2 = _seg_sq(px, py, pz, c[0], c[1], c[2], a[0], a[1], a[2])
        return min(d0, min(d1, d2))

    apx, apy, apz = px - a[0], py - a[1], pz - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return apx * apx + apy * apy + apz * apz

    bpx, bpy, bpz = px - b[0], py - b[1], pz - b[2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bpx * bpx + bpy * bpy + bpz * bpz

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        qx, qy, qz = apx - v * abx, apy - v * aby, apz - v * abz
        return qx * qx + qy * qy + qz * qz

    cpx, cpy, cpz = px - c[0], py - c[1], pz - c[2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cpx * cpx + cpy * cpy + cpz * cpz

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        qx, qy, qz = apx - w * acx, apy - w * acy, apz - w * acz
        return qx * qx + qy * qy + qz * qz

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = bpx - w * (c[0] - b[0])
        qy = bpy - w * (c[1] - b[1])
        qz = bpz - w * (c[2] - b[2])
        return qx * qx + qy * qy + qz * qz

    # interior: distance along the face normal
    s = apx * nx + apy * ny + apz * nz
    return s * s / nn


@njit(cache=True)
def _build(tv, leaf_size):
    t = tv.shape[0]
    cen = (tv[:, 0, :] + tv[:, 1, :] + tv[:, 2, :]) / 3.0
    order = np.arange(t)
    cap = max(1, 2 * t)
    lo = np.empty((cap, 3))
    hi = np.empty((cap, 3))
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    stack = np.empty((cap, 3), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = t
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node, s, e = stack[sp, 0], stack[sp, 1], stack[sp, 2]
        for k in range(3):
            lo[node, k] = np.inf
            hi[node, k] = -np.inf
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for ii in range(s, e):
            tri = order[ii]
            for k in range(3):
                for j in range(3):
                    x = tv[tri, j, k]
                    if x < lo[node, k]:
                        lo[node, k] = x
                    if x > hi[node, k]:
                        hi[node, k] = x
                c = cen[tri, k]
                if c < clo[k]:
                    clo[k] = c
                if c > chi[k]:
                    chi[k] = c
        if e - s <= leaf_size:
            start[node] = s
            count[node] = e - s
            continue
        axis = 0
        ext = chi[0] - clo[0]
        for k in range(1, 3):
            if chi[k] - clo[k] > ext:
                ext = chi[k] - clo[k]
                axis = k
        seg = order[s:e].copy()
        idx = np.argsort(cen[seg, axis], kind="mergesort")
        order[s:e] = seg[idx]
        mid = (s + e) // 2
        left[node] = n_nodes
        right[node] = n_nodes + 1
        stack[sp, 0], stack[sp, 1], stack[sp, 2] = n_nodes, s, mid
        stack[sp + 1, 0], stack[sp + 1, 1], stack[sp + 1, 2] = n_nodes + 1, mid, e
        sp += 2
        n_nodes += 2
    return lo[:n_nodes], hi[:n_nodes], left[:n_nodes], right[:n_nodes], start[:n_nodes], count[:n_nodes], order


@njit(cache=True)
def _box_sq(p, lo, hi, node):
    d = 0.0
    for k in range(3):
        if p[k] < lo[node, k]:
            x = lo[node, k] - p[k]
            d += x * x
        elif p[k] > hi[node, k]:
            x = p[k] - hi[node, k]
            d += x * x
    return d


@njit(cache=True)
def _nearest(p, best, best_tri, tv, lo, hi, left, right, start, count, order, stack):
    """Closest triangle to p as (squared distance, index).

    ``best``/``best_tri`` seed the search with a known candidate (or inf/-1).
    Equal distances resolve to the lower triangle index.
    """
    sp = 0
    if _box_sq(p, lo, hi, 0) <= best:
        stack[0] = 0
        sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_sq(p, lo, hi, node) > best:
            continue
        if left[node] < 0:
            for ii in range(start[node], start[node] + count[node]):
                tri = order[ii]
                d = _tri_sq(p, tv[tri, 0], tv[tri, 1], tv[tri, 2])
                if d < best or (d == best and tri < best_tri):
                    best = d
                    best_tri = tri
            continue
        l, r = left[node], right[node]
        dl = _box_sq(p, lo, hi, l)
        dr = _box_sq(p, lo, hi, r)
        # push the farther child first so the nearer one is visited next
        if dl <= dr:
            if dr <= best:
                stack[sp] = r
                sp += 1
            if dl <= best:
                stack[sp] = l
                sp += 1
        else:
            if dl <= best:
                stack[sp] = l
                sp += 1
            if dr <= best:
                stack[sp] = r
                sp += 1
    return best, best_tri


@njit(cache=True)
def _query(points, tv, lo, hi, left, right, start, count, order):
    n = points.shape[0]
    out = np.empty(n)
    tri = np.empty(n, dtype=np.int64)
    stack = np.empty(2 * lo.shape[0] + 2, dtype=np.int64)
    for i in range(n):
        d, t = _nearest(points[i], np.inf, -1, tv, lo, hi, left, right, start, count, order, stack)
        out[i] = d
        tri[i] = t
    return out, tri


@njit(cache=True)
def _query_grid(origin, h, res, tv, lo, hi, left, right, start, count, order):
    """Distances at grid nodes, x fastest. Each node seeds its search with the
    exact distance to the previous node's nearest triangle, an upper bound
    that prunes most of the tree without changing the result."""
    out = np.empty(res * res * res)
    stack = np.empty(2 * lo.shape[0] + 2, dtype=np.int64)
    p = np.empty(3)
    for k in range(res):
        for j in range(res):
            prev_tri = -1
            for i in range(res):
                p[0] = origin[0] + i * h
                p[1] = origin[1] + j * h
                p[2] = origin[2] + k * h
                ub = np.inf
                if prev_tri >= 0:
                    ub = _tri_sq(p, tv[prev_tri, 0], tv[prev_tri, 1], tv[prev_tri, 2])
                d, t = _nearest(p, ub, prev_tri, tv, lo, hi, left, right, start, count, order, stack)
                out[i + res * (j + res * k)] = d
                prev_tri = t
    return out


class TriangleBVH:
    """Read-only acceleration structure over the triangles of one mesh."""

    def __init__(self, mesh: TriangleMesh, leaf_size: int = LEAF_SIZE):
        if mesh.n_triangles == 0:
            raise ValueError("mesh has no triangles")
        self.tv = np.ascontiguousarray(mesh.vertices[mesh.triangles])
        self._nodes = _build(self.tv, leaf_size)

    def squared_distance(self, points: np.ndarray) -> np.ndarray:
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        d, _ = _query(pts, self.tv, *self._nodes)
        return d

    def closest_triangle(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        return _query(pts, self.tv, *self._nodes)

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.sqrt(self.squared_distance(points))

    def grid_squared_distance(self, origin, cell: float, res: int) -> np.ndarray:
        origin = np.asarray(origin, dtype=np.float64)
        return _query_grid(origin, float(cell), int(res), self.tv, *self._nodes)


def point_triangle_distance(p, tri) -> float:
    """Exact Euclidean distance from ``p`` to the closed triangle ``tri`` (3x3)."""
    p = np.asarray(p, dtype=np.float64)
    tri = np.asarray(tri, dtype=np.float64)
    return math.sqrt(_tri_sq(p, tri[0], tri[1], tri[2]))


def point_mesh_squared_distance(points, mesh: TriangleMesh) -> np.ndarray:
    return TriangleBVH(mesh).squared_distance(points)
