"""Small hand-built meshes shared by the tests."""

import numpy as np

from defret.geometry import TriangleMesh


def cube(offset=(0.0, 0.0, 0.0), size=1.0) -> TriangleMesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float) * size
    v += np.asarray(offset)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return TriangleMesh(v, np.array(tris))


def box(lo, hi) -> TriangleMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    c = cube()
    return TriangleMesh(lo + c.vertices * (hi - lo), c.triangles)


def tetra() -> TriangleMesh:
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    return TriangleMesh(v, np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]))


def sheet(n=10, size=1.0, offset=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Square grid sheet in the z=0 plane, centred on the origin."""
    xs = np.linspace(-size / 2, size / 2, n + 1)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], 1) + np.asarray(offset)
    idx = lambda i, j: i * (n + 1) + j  # noqa: E731
    tris = []
    for i in range(n):
        for j in range(n):
            tris += [(idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)), (idx(i, j), idx(i + 1, j + 1), idx(i, j + 1))]
    return TriangleMesh(v, np.array(tris))


def bar(length=1.0, n=10, width=0.1) -> TriangleMesh:
    """A thin strip along x, length ``length``, centred at the origin."""
    xs = np.linspace(-length / 2, length / 2, n + 1)
    v = np.concatenate([np.stack([xs, np.full_like(xs, -width / 2), np.zeros_like(xs)], 1),
                        np.stack([xs, np.full_like(xs, width / 2), np.zeros_like(xs)], 1)])
    m = n + 1
    tris = [t for i in range(n) for t in ((i, i + 1, m + i + 1), (i, m + i + 1, m + i))]
    return TriangleMesh(v, np.array(tris))


def icosphere(level=2, radius=1.0) -> TriangleMesh:
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11),
         (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriangleMesh(np.array(verts) * radius, np.array(f))
