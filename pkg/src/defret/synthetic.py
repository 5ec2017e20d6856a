"""Procedural shape families with known deformability structure.

Each shape is a union of axis-aligned boxes, polygonised with marching cubes
into one connected closed mesh. Attributes such as height or thickness can be
reached by deforming a shape. The part layout (leg or tooth count) cannot,
because parts can merge but never split.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from skimage.measure import marching_cubes

from .geometry import ShapeRecord, TriangleMesh, make_record, normalize
from .geometry.mesh import MeshError

STRUCTURES = {
    "table": ("four_leg", "pedestal", "trestle"),
    "comb": ("teeth",),
    "box": ("box",),
}


@dataclass
class FamilyParams:
    family: str = "table"
    structures: tuple = ("four_leg", "pedestal", "trestle")
    # attribute ranges, (lo, hi); interpretation depends on the family
    width: tuple = (0.9, 1.3)
    depth: tuple = (0.5, 0.9)
    height: tuple = (0.5, 0.9)
    top_thickness: tuple = (0.07, 0.12)
    leg_thickness: tuple = (0.07, 0.1)
    teeth: tuple = (2, 4)
    pitch: float = 0.035
    n_train: int = 2048
    n_eval: int = 50_000
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.family not in STRUCTURES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family != "comb":
            bad = [s for s in self.structures if s not in STRUCTURES[self.family]]
            if bad:
                raise ValueError(f"unknown structures {bad} for family {self.family!r}")
        for name in ("width", "depth", "height", "top_thickness", "leg_thickness"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"bad range for {name}: {(lo, hi)}")
        if self.pitch <= 0:
            raise ValueError("pitch must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _box_sdf(p: np.ndarray, lo, hi) -> np.ndarray:
    c = 0.5 * (np.asarray(lo) + np.asarray(hi))
    half = 0.5 * (np.asarray(hi) - np.asarray(lo))
    q = np.abs(p - c) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def boxes_to_mesh(boxes, pitch: float) -> TriangleMesh:
    """Marching-cubes surface of the union of boxes [(lo, hi), ...]."""
    lo = np.min([b[0] for b in boxes], axis=0) - 2 * pitch
    hi = np.max([b[1] for b in boxes], axis=0) + 2 * pitch
    n = np.ceil((hi - lo) / pitch).astype(int) + 1
    axes = [lo[i] + pitch * np.arange(n[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    sdf = np.min([_box_sdf(grid, b0, b1) for b0, b1 in boxes], axis=0)
    verts, faces, _, _ = marching_cubes(sdf, level=0.0, spacing=(pitch,) * 3, allow_degenerate=False)
    return TriangleMesh(verts + lo, faces.astype(np.int64))


def table_boxes(structure: str, w, d, h, top, leg):
    boxes = [((-w / 2, -d / 2, h - top), (w / 2, d / 2, h))]
    # legs reach into the top so the union stays connected
    y_top = h - top / 2
    if structure == "four_leg":
        ix, iy = w / 2 - leg, d / 2 - leg
        for sx in (-1, 1):
            for sy in (-1, 1):
                cx, cy = sx * ix, sy * iy
                boxes.append(((cx - leg / 2, cy - leg / 2, 0.0), (cx + leg / 2, cy + leg / 2, y_top)))
    elif structure == "pedestal":
        col = 1.8 * leg
        boxes.append(((-col / 2, -col / 2, 0.0), (col / 2, col / 2, y_top)))
        boxes.append(((-0.3 * w, -0.3 * d, 0.0), (0.3 * w, 0.3 * d, leg)))
    elif structure == "trestle":
        ix = w / 2 - leg
        for sx in (-1, 1):
            cx = sx * ix
            boxes.append(((cx - leg / 2, -d / 2 + leg / 2, 0.0), (cx + leg / 2, d / 2 - leg / 2, y_top)))
    else:
        raise ValueError(f"unknown table structure {structure!r}")
    return boxes


def comb_boxes(n_teeth: int, length=1.0, tooth_len=0.5, spine=0.1, thick=0.1, tooth_w=0.1):
    """A spine along x with ``n_teeth`` evenly spread teeth hanging in -z."""
    if n_teeth < 1:
        raise ValueError("comb needs at least one tooth")
    boxes = [((-length / 2, -thick / 2, 0.0), (length / 2, thick / 2, spine))]
    centers = (np.arange(n_teeth) + 0.5) / n_teeth * length - length / 2
    for cx in centers:
        boxes.append(((cx - tooth_w / 2, -thick / 2, -tooth_len), (cx + tooth_w / 2, thick / 2, spine / 2)))
    return boxes


def comb_mesh(n_teeth: int, pitch: float = 0.03, **kw) -> TriangleMesh:
    return normalize(boxes_to_mesh(comb_boxes(n_teeth, **kw), pitch))


def generate_synthetic(family_params: FamilyParams, count: int, seed: int,
                       first_id: int = 0) -> list[ShapeRecord]:
    """``count`` normalized shapes, structures assigned round-robin, attributes drawn from ``seed``."""
    if count < 2:
        raise ValueError("need at least two shapes")
    fp = family_params
    fp.validate()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        u = rng.random(6)

        def pick(rng_range, x):
            return rng_range[0] + x * (rng_range[1] - rng_range[0])

        if fp.family == "table":
            structure = fp.structures[i % len(fp.structures)]
            boxes = table_boxes(structure, pick(fp.width, u[0]), pick(fp.depth, u[1]), pick(fp.height, u[2]),
                                pick(fp.top_thickness, u[3]), pick(fp.leg_thickness, u[4]))
            name = f"table-{structure}-{i:03d}"
        elif fp.family == "comb":
            choices = list(range(fp.teeth[0], fp.teeth[1] + 1))
            n = choices[i % len(choices)]
            boxes = comb_boxes(n, length=pick(fp.width, u[0]), tooth_len=pick(fp.height, u[2]) * 0.7,
                               spine=pick(fp.top_thickness, u[3]), thick=pick(fp.leg_thickness, u[4]),
                               tooth_w=pick(fp.leg_thickness, u[5]))
            name = f"comb-{n}-{i:03d}"
        else:
            w, d, h = pick(fp.width, u[0]), pick(fp.depth, u[1]), pick(fp.height, u[2])
            boxes = [((-w / 2, -d / 2, 0.0), (w / 2, d / 2, h))]
            name = f"box-{i:03d}"
        try:
            mesh = normalize(boxes_to_mesh(boxes, fp.pitch))
        except (ValueError, RuntimeError) as exc:
            raise MeshError(f"generation failed for shape {i}: {exc}") from exc
        sid = first_id + i
        out.append(make_record(sid, mesh, seed=int(rng.integers(0, 2**31 - 1)), name=name,
                               n_train=fp.n_train, n_eval=fp.n_eval))
    return out
