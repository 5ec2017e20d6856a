from __future__ import annotations

import numpy as np

from .mesh import MeshError, PointCloud, TriangleMesh

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def _uniform(seed: int, stream: int, tri: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Counter-based uniforms in (0, 1) keyed by (seed, stream, triangle, arrival)."""
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN + np.uint64(stream))
        h = _mix(h ^ (tri.astype(np.uint64) * _GOLDEN))
        h = _mix(h ^ (k.astype(np.uint64) + np.uint64(1)) * _M1)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def sample_surface(mesh: TriangleMesh, n: int, seed: int, shape_id=None) -> PointCloud:
    """Uniform area-weighted surface sample of exactly ``n`` points.

    Every triangle owns a Poisson arrival stream with rate equal to its area,
    drawn from its own counter-based random sequence; the ``n`` earliest
    arrivals over all triangles are kept. The superposition makes the points
    i.i.d. with triangle probability proportional to area. Because each
    triangle's randomness is independent of every other triangle, moving the
    vertices a little moves the samples a little instead of reshuffling them,
    which keeps the self fitting gap near zero.
    """
    if n <= 0:
        raise ValueError("sample count must be positive")
    areas = mesh.triangle_areas()
    total = float(areas.sum())
    if not np.isfinite(total) or total <= 0.0:
        raise MeshError("mesh has no triangle with positive area")
    live = np.flatnonzero(areas > 0)
    rate = areas[live] / total
    k = int(np.ceil(n * rate.max() * 1.5 + 8 * np.sqrt(n * rate.max()) + 8))
    while True:
        kk = np.arange(k)
        tri_g, k_g = np.meshgrid(live, kk, indexing="ij")
        gaps = -np.log(_uniform(seed, 0, tri_g, k_g))
        keys = np.cumsum(gaps, axis=1) / rate[:, None]
        flat = keys.ravel()
        if flat.size < n:
            k *= 2
            continue
        chosen = np.argpartition(flat, n - 1)[:n]
        cutoff = flat[chosen].max()
        # every stream must have run past the cutoff, else arrivals are missing
        if np.all(keys[:, -1] > cutoff):
            break
        k *= 2
    chosen = chosen[np.lexsort((chosen, flat[chosen]))]
    row, col = np.divmod(chosen, k)
    tri = live[row]
    r1 = _uniform(seed, 1, tri, col)
    r2 = _uniform(seed, 2, tri, col)
    sq = np.sqrt(r1)[:, None]
    r2 = r2[:, None]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    pts = (1.0 - sq) * a + sq * (1.0 - r2) * b + sq * r2 * c
    return PointCloud(pts, shape_id, seed)
