"""Mesh readers (OBJ, OFF, ascii/binary PLY) and point-cloud writers."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import MeshError, PointCloud, TriangleMesh

CLOUD_MAGIC = b"DRPC"


def _fan(face: list[int]) -> list[tuple[int, int, int]]:
    if len(face) < 3:
        raise MeshError(f"face with {len(face)} vertices cannot be triangulated")
    return [(face[0], face[i], face[i + 1]) for i in range(1, len(face) - 1)]


def _build(verts, faces) -> TriangleMesh:
    if len(verts) == 0:
        raise MeshError("mesh has no vertices")
    tris = [t for f in faces for t in _fan(f)]
    return TriangleMesh(np.asarray(verts, dtype=np.float64), np.asarray(tris, dtype=np.int64).reshape(-1, 3))


def read_obj(path: Path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    # negative indices are relative to the current vertex count
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                faces.append(idx)
    return _build(verts, faces)


def _tokens(fh):
    for line in fh:
        line = line.split("#", 1)[0]
        yield from line.split()


def read_off(path: Path) -> TriangleMesh:
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        tok = _tokens(fh)
        head = next(tok)
        if not head.endswith("OFF"):
            raise MeshError("missing OFF header")
        nv, nf = int(next(tok)), int(next(tok))
        next(tok)
        verts = [[float(next(tok)) for _ in range(3)] for _ in range(nv)]
        faces = []
        for _ in range(nf):
            n = int(next(tok))
            faces.append([int(next(tok)) for _ in range(n)])
    return _build(verts, faces)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path: Path) -> TriangleMesh:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshError("missing ply magic")
        fmt = None
        elements = []  # (name, count, [(prop, type) or (prop, ("list", ctype, itype))])
        while True:
            line = fh.readline()
            if not line:
                raise MeshError("unterminated ply header")
            parts = line.decode("ascii", "replace").split()
            if not parts or parts[0] in ("comment", "obj_info"):
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if parts[1] == "list":
                    elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
                else:
                    elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
            elif parts[0] == "end_header":
                break
        body = fh.read()

    if fmt == "ascii":
        return _ply_ascii(body, elements)
    if fmt in ("binary_little_endian", "binary_big_endian"):
        return _ply_binary(body, elements, "<" if fmt == "binary_little_endian" else ">")
    raise MeshError(f"unsupported ply format {fmt!r}")


def _ply_ascii(body: bytes, elements) -> TriangleMesh:
    tok = iter(body.decode("ascii", "replace").split())
    verts, faces = [], []
    for name, count, props in elements:
        for _ in range(count):
            rec = {}
            for pname, ptype in props:
                if isinstance(ptype, tuple):
                    n = int(next(tok))
                    rec[pname] = [int(next(tok)) for _ in range(n)]
                else:
                    rec[pname] = float(next(tok))
            if name == "vertex":
                verts.append([rec["x"], rec["y"], rec["z"]])
            elif name == "face":
                faces.append(rec.get("vertex_indices", rec.get("vertex_index")))
    return _build(verts, faces)


def _ply_binary(body: bytes, elements, order: str) -> TriangleMesh:
    off = 0
    verts, faces = [], []
    for name, count, props in elements:
        if all(not isinstance(t, tuple) for _, t in props):
            dt = np.dtype([(p, order + t) for p, t in props])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            if name == "vertex":
                verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            continue
        for _ in range(count):
            rec = {}
            for pname, ptype in props:
                if isinstance(ptype, tuple):
                    _, ct, it = ptype
                    cdt, idt = np.dtype(order + ct), np.dtype(order + it)
                    n = int(np.frombuffer(body, cdt, 1, off)[0])
                    off += cdt.itemsize
                    rec[pname] = np.frombuffer(body, idt, n, off).astype(np.int64).tolist()
                    off += idt.itemsize * n
                else:
                    dt = np.dtype(order + ptype)
                    rec[pname] = np.frombuffer(body, dt, 1, off)[0]
                    off += dt.itemsize
            if name == "face":
                faces.append(rec.get("vertex_indices", rec.get("vertex_index")))
    return _build(verts, faces)


def load_mesh(path) -> TriangleMesh:
    """Read an OBJ, OFF or PLY file. Polygons are fan-triangulated; vertices are left as stored."""
    path = Path(path)
    suffix = path.suffix.lower()
    readers = {".obj": read_obj, ".off": read_off, ".ply": read_ply}
    if suffix not in readers:
        raise MeshError(f"unsupported mesh format {suffix!r}")
    try:
        return readers[suffix](path)
    except (StopIteration, KeyError, IndexError, struct.error) as exc:
        raise MeshError(f"malformed {suffix[1:]} file {path}: {exc}") from exc
    except (ValueError, OSError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"cannot read {path}: {exc}") from exc


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def write_off(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"OFF\n{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def write_ply(path, mesh: TriangleMesh, binary: bool = True) -> None:
    head = (
        "ply\nformat {fmt} 1.0\nelement vertex {nv}\nproperty double x\nproperty double y\n"
        "property double z\nelement face {nf}\nproperty list uchar int vertex_indices\nend_header\n"
    ).format(fmt="binary_little_endian" if binary else "ascii", nv=mesh.n_vertices, nf=mesh.n_triangles)
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        if binary:
            fh.write(mesh.vertices.astype("<f8").tobytes())
            rec = np.zeros(mesh.n_triangles, dtype=[("n", "u1"), ("i", "<i4", 3)])
            rec["n"] = 3
            rec["i"] = mesh.triangles
            fh.write(rec.tobytes())
        else:
            for v in mesh.vertices:
                fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n".encode())
            for t in mesh.triangles:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode())


def write_xyz(path, cloud: PointCloud) -> None:
    np.savetxt(path, cloud.points, fmt="%.9g")


def write_cloud_bin(path, cloud: PointCloud) -> None:
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC + struct.pack("<I", len(cloud)))
        fh.write(cloud.points.astype("<f4").tobytes())


def read_cloud_bin(path) -> PointCloud:
    data = Path(path).read_bytes()
    if data[:4] != CLOUD_MAGIC:
        raise MeshError("bad point cloud magic")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 12 * n:
        raise MeshError("truncated point cloud file")
    return PointCloud(np.frombuffer(data, "<f4", 3 * n, 8).reshape(n, 3).astype(np.float64))
