"""Triangle meshes, point clouds and the per-shape record."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class MeshError(ValueError):
    pass


def _edges_of(triangles: np.ndarray) -> np.ndarray:
    if len(triangles) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=0
    )
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable triangle mesh. ``edges`` is derived: sorted unique undirected pairs."""

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(v) == 0:
            raise MeshError("mesh has no vertices")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        e = _edges_of(t)
        e.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "edges", e)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError("vertex count mismatch")
        return TriangleMesh(vertices, self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(
            self.triangles, other.triangles
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    source_shape_id: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class ShapeRecord:
    id: int
    mesh: TriangleMesh
    cloud_train: Optional[PointCloud] = None
    cloud_eval: Optional[PointCloud] = None
    name: str = ""


def normalize(mesh: TriangleMesh) -> TriangleMesh:
    """Center the bounding box at the origin and scale its diagonal to 1."""
    lo, hi = mesh.bbox()
    diag = float(np.linalg.norm(hi - lo))
    if not np.isfinite(diag) or diag <= 0.0:
        raise MeshError("degenerate bounding box")
    center = 0.5 * (lo + hi)
    return TriangleMesh((mesh.vertices - center) / diag, mesh.triangles)
