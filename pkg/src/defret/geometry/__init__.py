from .bvh import TriangleBVH, point_mesh_squared_distance, point_triangle_distance
from .chamfer import (
    SpatialIndex,
    chamfer_pm,
    chamfer_pp,
    chamfer_pp_brute,
    nearest_brute,
    one_way_pm,
)
from .io import load_mesh, read_cloud_bin, write_cloud_bin, write_obj, write_off, write_ply, write_xyz
from .mesh import MeshError, PointCloud, ShapeRecord, TriangleMesh, normalize
from .sampling import sample_surface

N_TRAIN_POINTS = 2048
N_EVAL_POINTS = 50_000


def make_record(shape_id: int, mesh: TriangleMesh, seed: int, name: str = "",
                n_train: int = N_TRAIN_POINTS, n_eval: int = N_EVAL_POINTS) -> ShapeRecord:
    """Build a record from an already normalized mesh; both clouds come from ``seed``."""
    train = sample_surface(mesh, n_train, seed, shape_id)
    evalc = sample_surface(mesh, n_eval, seed + 1, shape_id) if n_eval else None
    return ShapeRecord(shape_id, mesh, train, evalc, name)


__all__ = [
    "MeshError", "PointCloud", "ShapeRecord", "SpatialIndex", "TriangleBVH", "TriangleMesh",
    "chamfer_pm", "chamfer_pp", "chamfer_pp_brute", "load_mesh", "make_record", "nearest_brute",
    "normalize", "one_way_pm", "point_mesh_squared_distance", "point_triangle_distance",
    "read_cloud_bin", "sample_surface", "write_cloud_bin", "write_obj", "write_off", "write_ply",
    "write_xyz", "N_TRAIN_POINTS", "N_EVAL_POINTS",
]
