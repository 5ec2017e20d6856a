"""Nearest neighbours and the Chamfer distance family.

All distances are squared by default; pass ``squared=False`` for the
unsquared per-point variant.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .bvh import TriangleBVH
from .mesh import PointCloud, ShapeRecord, TriangleMesh

_TIE_K = 8


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point cloud")
    return pts


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


class SpatialIndex:
    """Balanced KD-tree over a point set.

    Nearest-neighbour ties resolve to the lowest point index, which makes the
    answer identical to a brute-force scan.
    """

    def __init__(self, points):
        self.points = _points(points)
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Return (squared distance, index) of the nearest stored point for each query."""
        q = _points(queries)
        k = min(_TIE_K, len(self.points))
        _, idx = self._tree.query(q, k=k)
        idx = idx.reshape(len(q), k)
        d2 = _sqdist(q[:, None, :], self.points[idx])
        best = d2.min(axis=1)
        tied = d2 == best[:, None]
        cand = np.where(tied, idx, np.iinfo(np.int64).max)
        out_idx = cand.min(axis=1)
        # every returned neighbour tied: there may be more equal ones beyond k
        for i in np.flatnonzero(tied.all(axis=1) & (k < len(self.points))):
            r = np.sqrt(best[i]) * (1 + 1e-12) + 1e-300
            ball = np.asarray(self._tree.query_ball_point(q[i], r), dtype=np.int64)
            bd = _sqdist(q[i][None, :], self.points[ball])
            out_idx[i] = ball[bd == bd.min()].min()
            best[i] = bd.min()
        return best, out_idx


def nearest_brute(queries, points) -> tuple[np.ndarray, np.ndarray]:
    """O(n*m) reference for :meth:`SpatialIndex.nearest`."""
    q, p = _points(queries), _points(points)
    d2 = _sqdist(q[:, None, :], p[None, :, :])
    idx = np.argmin(d2, axis=1)  # argmin returns the first minimum
    return d2[np.arange(len(q)), idx], idx


def chamfer_pp(a, b, squared: bool = True) -> float:
    """Average two-way point-to-point Chamfer distance."""
    pa, pb = _points(a), _points(b)
    d_ab, _ = SpatialIndex(pb).nearest(pa)
    d_ba, _ = SpatialIndex(pa).nearest(pb)
    if not squared:
        d_ab, d_ba = np.sqrt(d_ab), np.sqrt(d_ba)
    return float(d_ab.mean() + d_ba.mean())


def chamfer_pp_brute(a, b, squared: bool = True) -> float:
    pa, pb = _points(a), _points(b)
    d_ab, _ = nearest_brute(pa, pb)
    d_ba, _ = nearest_brute(pb, pa)
    if not squared:
        d_ab, d_ba = np.sqrt(d_ab), np.sqrt(d_ba)
    return float(d_ab.mean() + d_ba.mean())


def _to_mesh(points, mesh: TriangleMesh | TriangleBVH, squared: bool) -> float:
    bvh = mesh if isinstance(mesh, TriangleBVH) else TriangleBVH(mesh)
    d = bvh.squared_distance(_points(points))
    return float((d if squared else np.sqrt(d)).mean())


def chamfer_pm(a: ShapeRecord, b: ShapeRecord, squared: bool = True) -> float:
    """Two-way point-to-mesh Chamfer distance using each shape's dense evaluation cloud."""
    for s in (a, b):
        if s.cloud_eval is None:
            raise ValueError(f"shape {s.id} has no evaluation cloud")
    return _to_mesh(a.cloud_eval, b.mesh, squared) + _to_mesh(b.cloud_eval, a.mesh, squared)


def one_way_pm(partial, model: TriangleMesh, squared: bool = True) -> float:
    """Mean distance from every partial-scan point to the model surface."""
    return _to_mesh(partial, model, squared)
