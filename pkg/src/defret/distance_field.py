"""Unsigned distance function of a target shape sampled on a regular grid."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .geometry import ShapeRecord, TriangleBVH, TriangleMesh

MAGIC = b"DUDF"
DEFAULT_RESOLUTION = 100
DEFAULT_MARGIN = 0.1


class GridFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class UnsignedDistanceGrid:
    """Values live on grid nodes ``origin + cell_size * (i, j, k)``; ``values[i, j, k]``."""

    resolution: int
    origin: np.ndarray
    cell_size: float
    values: np.ndarray

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.cell_size * (self.resolution - 1)

    def node(self, i: int, j: int, k: int) -> np.ndarray:
        return self.origin + self.cell_size * np.array([i, j, k], dtype=np.float64)

    def contains(self, p, margin: float = 0.0) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return np.all((p >= self.origin + margin) & (p <= self.upper - margin), axis=-1)


def grid_box(mesh: TriangleMesh, margin: float = DEFAULT_MARGIN):
    """Cube centred on the bbox with side = bbox diagonal * (1 + 2*margin).

    The diagonal bounds every extent, so the target bbox is covered with at
    least ``margin`` on each side, and for unit-diagonal shapes the cube holds
    any other normalized shape as well.
    """
    lo, hi = mesh.bbox()
    side = float(np.linalg.norm(hi - lo)) * (1.0 + 2.0 * margin)
    return 0.5 * (lo + hi) - 0.5 * side, side


def build_udf(target, resolution: int = DEFAULT_RESOLUTION, margin: float = DEFAULT_MARGIN) -> UnsignedDistanceGrid:
    """Exact point-to-mesh distance at every grid node."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    mesh = target.mesh if isinstance(target, ShapeRecord) else target
    origin, side = grid_box(mesh, margin)
    cell = side / (resolution - 1)
    flat = TriangleBVH(mesh).grid_squared_distance(origin, cell, resolution)
    values = np.sqrt(flat).reshape((resolution,) * 3, order="F")
    values.setflags(write=False)
    return UnsignedDistanceGrid(resolution, origin, cell, values)


@njit(cache=True)
def _cell(values, i0, j0, k0, tx, ty, tz):
    """Trilinear value and partials (in cell units) inside cell (i0, j0, k0)."""
    v000 = values[i0, j0, k0]
    v100 = values[i0 + 1, j0, k0]
    v010 = values[i0, j0 + 1, k0]
    v110 = values[i0 + 1, j0 + 1, k0]
    v001 = values[i0, j0, k0 + 1]
    v101 = values[i0 + 1, j0, k0 + 1]
    v011 = values[i0, j0 + 1, k0 + 1]
    v111 = values[i0 + 1, j0 + 1, k0 + 1]
    c00 = v000 + tx * (v100 - v000)
    c10 = v010 + tx * (v110 - v010)
    c01 = v001 + tx * (v101 - v001)
    c11 = v011 + tx * (v111 - v011)
    c0 = c00 + ty * (c10 - c00)
    c1 = c01 + ty * (c11 - c01)
    d00 = v100 - v000
    d10 = v110 - v010
    d01 = v101 - v001
    d11 = v111 - v011
    d0 = d00 + ty * (d10 - d00)
    d1 = d01 + ty * (d11 - d01)
    gx = d0 + tz * (d1 - d0)
    gy = (c10 - c00) + tz * ((c11 - c01) - (c10 - c00))
    gz = c1 - c0
    return c0 + tz * (c1 - c0), gx, gy, gz


@njit(cache=True)
def _trilinear(values, origin, h, res, pts, want_grad):
    n = pts.shape[0]
    out = np.empty(n)
    grad = np.zeros((n, 3))
    top = h * (res - 1)
    c = np.empty(3)
    idx = np.empty(3, dtype=np.int64)
    t = np.empty(3)
    og = np.empty(3)
    part = np.empty(3)
    for m in range(n):
        # clamp into the box; the outside part adds plain Euclidean distance
        for a in range(3):
            og[a] = 0.0
            x = pts[m, a] - origin[a]
            if x < 0.0:
                og[a] = x
                x = 0.0
            elif x > top:
                og[a] = x - top
                x = top
            c[a] = x / h
            # snap round-off so a query at a node returns the stored value exactly
            r = np.floor(c[a] + 0.5)
            if abs(c[a] - r) < 1e-10:
                c[a] = r
            idx[a] = min(int(np.floor(c[a])), res - 2)
            t[a] = c[a] - idx[a]
        ox = np.sqrt(og[0] * og[0] + og[1] * og[1] + og[2] * og[2])
        val, part[0], part[1], part[2] = _cell(values, idx[0], idx[1], idx[2], t[0], t[1], t[2])
        out[m] = val + ox
        if want_grad:
            for a in range(3):
                if og[a] != 0.0:
                    continue
                g = part[a]
                if t[a] == 0.0 and idx[a] > 0:
                    # on a node plane the field may have a kink: take the mean of both one-sided slopes
                    lo = idx.copy()
                    tl = t.copy()
                    lo[a] -= 1
                    tl[a] = 1.0
                    _, p0, p1, p2 = _cell(values, lo[0], lo[1], lo[2], tl[0], tl[1], tl[2])
                    other = p0 if a == 0 else (p1 if a == 1 else p2)
                    g = 0.5 * (g + other)
                grad[m, a] = g / h
            if ox > 0.0:
                for a in range(3):
                    grad[m, a] += og[a] / ox
    return out, grad


def _pts(p) -> tuple[np.ndarray, bool]:
    arr = np.asarray(p, dtype=np.float64)
    single = arr.ndim == 1
    return np.ascontiguousarray(arr.reshape(-1, 3)), single


def query(grid: UnsignedDistanceGrid, p):
    """Trilinear interpolation of the 8 surrounding node values.

    Outside the grid the point is clamped to the box and its distance to the
    box is added, so the field stays finite and keeps growing.
    """
    pts, single = _pts(p)
    v, _ = _trilinear(grid.values, grid.origin, grid.cell_size, grid.resolution, pts, False)
    return float(v[0]) if single else v


def query_with_gradient(grid: UnsignedDistanceGrid, p):
    """Value and exact derivative of :func:`query`.

    On a node plane the two one-sided slopes are averaged, which is zero at a
    symmetric kink such as a surface lying on a grid layer.
    """
    pts, single = _pts(p)
    v, g = _trilinear(grid.values, grid.origin, grid.cell_size, grid.resolution, pts, True)
    return (float(v[0]), g[0]) if single else (v, g)


def gradient(grid: UnsignedDistanceGrid, p):
    """Central difference of :func:`query` with step ``cell_size / 2``.

    Within one cell of the grid boundary the difference turns one-sided on
    that axis so no sample leaves the grid.
    """
    pts, single = _pts(p)
    h = 0.5 * grid.cell_size
    lo = grid.origin + grid.cell_size
    hi = grid.upper - grid.cell_size
    f0 = query(grid, pts)
    g = np.empty_like(pts)
    for a in range(3):
        step = np.zeros(3)
        step[a] = h
        fwd = pts[:, a] >= lo[a]
        bwd = pts[:, a] <= hi[a]
        plus = np.where(bwd, query(grid, pts + step), f0)
        minus = np.where(fwd, query(grid, pts - step), f0)
        span = np.where(fwd & bwd, 2 * h, h)
        g[:, a] = (plus - minus) / span
    return g[0] if single else g


def save_grid(path, grid: UnsignedDistanceGrid) -> None:
    head = MAGIC + struct.pack("<I", grid.resolution) + struct.pack("<3d", *grid.origin) + struct.pack("<d", grid.cell_size)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes())


def load_grid(path) -> UnsignedDistanceGrid:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise GridFormatError("bad grid magic")
    (res,) = struct.unpack_from("<I", data, 4)
    origin = np.array(struct.unpack_from("<3d", data, 8))
    (cell,) = struct.unpack_from("<d", data, 32)
    body = data[40:]
    if len(body) != 4 * res**3:
        raise GridFormatError("truncated grid file")
    values = np.frombuffer(body, "<f4").astype(np.float64).reshape((res,) * 3, order="F")
    values.setflags(write=False)
    return UnsignedDistanceGrid(res, origin, cell, values)
