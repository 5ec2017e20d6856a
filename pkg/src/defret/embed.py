"""Shape encoder F, egocentric field G, and the observer-weighted distance between codes.

delta(t; s) = sqrt(sum_i g_s[i] * (z_t[i] - z_s[i])**2), with g_s = G(s) > 0.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .geometry import PointCloud, ShapeRecord

EPS_FIELD = 1e-6
MAGIC = b"DEMB"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    k: int = 256
    point_widths: tuple = (64, 128, 256)
    head_widths: tuple = (256,)
    input_points: int = 2048  # prefix of the training cloud fed to the encoder

    def __post_init__(self):
        if self.k < 1 or not self.point_widths or min(self.point_widths) < 1 or min(self.head_widths, default=1) < 1:
            raise ValueError(f"invalid architecture {self}")
        if self.input_points < 1:
            raise ValueError("input_points must be positive")

    def to_dict(self) -> dict:
        return {"k": self.k, "point_widths": list(self.point_widths), "head_widths": list(self.head_widths),
                "input_points": self.input_points}


def _mlp(sizes: Sequence[int], last_act: bool) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if last_act or i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class EmbeddingModel(nn.Module):
    """Shared per-point MLP, max pool, then two heads (embedding F and field G)."""

    def __init__(self, arch: Architecture = Architecture(), seed: int = 0):
        super().__init__()
        self.arch = arch
        self.seed = seed
        self.point_mlp = _mlp((3, *arch.point_widths), last_act=True)
        feat = arch.point_widths[-1]
        self.head_f = _mlp((feat, *arch.head_widths, arch.k), last_act=False)
        self.head_g = _mlp((feat, *arch.head_widths, arch.k), last_act=False)
        self.reset_parameters(seed)

    @property
    def k(self) -> int:
        return self.arch.k

    def reset_parameters(self, seed: int) -> None:
        # uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / float(np.sqrt(mod.in_features))
                    for p in (mod.weight, mod.bias):
                        p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * (2 * bound) - bound)

    def features(self, points: torch.Tensor) -> torch.Tensor:
        """(..., n, 3) -> (..., width) by channel-wise max over points."""
        if points.shape[-2] == 0:
            raise ValueError("empty point cloud")
        return self.point_mlp(points).amax(dim=-2)

    def embed(self, feat: torch.Tensor) -> torch.Tensor:
        return self.head_f(feat)

    def field(self, feat: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head_g(feat)) + EPS_FIELD

    def forward(self, points: torch.Tensor):
        feat = self.features(points)
        return self.embed(feat), self.field(feat)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


@dataclass
class EgocentricCode:
    z: np.ndarray
    g: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.g is not None and not np.all(self.g > 0):
            raise ValueError("field entries must be strictly positive")


def canonical_points(cloud, dtype=np.float32) -> np.ndarray:
    """Sorted, de-duplicated rows.

    The max pool ignores order and multiplicity, so this changes nothing
    mathematically, but it makes the float result independent of how the
    points happen to be arranged.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError("expected a non-empty n x 3 cloud")
    return np.unique(pts.astype(dtype), axis=0)


def shape_points(model: EmbeddingModel, shape: ShapeRecord) -> np.ndarray:
    """The encoder input for a stored shape: a prefix of its training cloud.

    Samples are i.i.d., so any prefix is itself a uniform surface sample.
    """
    if shape.cloud_train is None:
        raise ValueError(f"shape {shape.id} has no training cloud")
    return shape.cloud_train.points[: model.arch.input_points]


def _np_dtype(model: EmbeddingModel):
    return np.float64 if model.dtype == torch.float64 else np.float32


def batch_tensor(model: EmbeddingModel, clouds: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack canonical clouds into (B, n, 3), padding short ones with their first point."""
    rows = [canonical_points(c, _np_dtype(model)) for c in clouds]
    n = max(len(r) for r in rows)
    out = np.empty((len(rows), n, 3), dtype=rows[0].dtype)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        out[i, len(r):] = r[0]
    return torch.from_numpy(out)


def encode(model: EmbeddingModel, cloud) -> np.ndarray:
    """Max-pooled per-point features of the given points."""
    with torch.no_grad():
        return model.features(torch.from_numpy(canonical_points(cloud, _np_dtype(model)))).numpy().astype(np.float64)


def code(model: EmbeddingModel, shape: ShapeRecord, with_field: bool = True) -> EgocentricCode:
    pts = shape_points(model, shape)
    with torch.no_grad():
        feat = model.features(torch.from_numpy(canonical_points(pts, _np_dtype(model))))
        z = model.embed(feat).numpy().astype(np.float64)
        g = model.field(feat).numpy().astype(np.float64) if with_field else None
    return EgocentricCode(z, g)


def ego_distance_sq(target: EgocentricCode, observer: EgocentricCode) -> float:
    if observer.g is None:
        raise ValueError("observer code has no field")
    if target.z.shape != observer.z.shape or observer.g.shape != observer.z.shape:
        raise ValueError(f"dimension mismatch: {target.z.shape} vs {observer.z.shape}")
    d = target.z - observer.z
    return float(np.sum(observer.g * d * d))


def ego_distance(target: EgocentricCode, observer: EgocentricCode) -> float:
    """Distance from ``target`` as seen by ``observer`` (the observer's field is used)."""
    return float(np.sqrt(ego_distance_sq(target, observer)))


def delta_sq(z_t: torch.Tensor, z_s: torch.Tensor, g_s: torch.Tensor) -> torch.Tensor:
    d = z_t - z_s
    return (g_s * d * d).sum(dim=-1)


def safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # exact value everywhere, zero gradient at zero instead of inf
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def delta(z_t: torch.Tensor, z_s: torch.Tensor, g_s: torch.Tensor) -> torch.Tensor:
    return safe_sqrt(delta_sq(z_t, z_s, g_s))


# checkpoints

def _descriptor(arch: Architecture) -> bytes:
    pw, hw = arch.point_widths, arch.head_widths
    return struct.pack(f"<I{len(pw)}II{len(hw)}II", len(pw), *pw, len(hw), *hw, arch.input_points)


def weights_digest(model: EmbeddingModel) -> str:
    h = hashlib.sha256()
    for t in model.state_dict().values():
        h.update(t.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, model: EmbeddingModel, meta: dict | None = None) -> Path:
    """Binary weights plus a ``.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    arch = model.arch
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, arch.k) + _descriptor(arch))
        for t in model.state_dict().values():
            fh.write(t.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    side = path.with_name(path.name + ".json")
    info = {"architecture": arch.to_dict(), "init_seed": model.seed, "weights": weights_digest(model)}
    info.update(meta or {})
    side.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return side


def load_checkpoint(path) -> tuple[EmbeddingModel, dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, k = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    (npw,) = struct.unpack_from("<I", data, off)
    pw = struct.unpack_from(f"<{npw}I", data, off + 4)
    off += 4 + 4 * npw
    (nhw,) = struct.unpack_from("<I", data, off)
    hw = struct.unpack_from(f"<{nhw}I", data, off + 4)
    off += 4 + 4 * nhw
    (n_in,) = struct.unpack_from("<I", data, off)
    off += 4
    side = path.with_name(path.name + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    model = EmbeddingModel(Architecture(k, tuple(pw), tuple(hw), n_in), seed=meta.get("init_seed", 0))
    state = model.state_dict()
    need = sum(t.numel() for t in state.values()) * 4
    if len(data) - off != need:
        raise CheckpointError(f"{path}: expected {need} weight bytes, found {len(data) - off}")
    for name, t in state.items():
        n = t.numel()
        arr = np.frombuffer(data, "<f4", count=n, offset=off).reshape(tuple(t.shape))
        state[name] = torch.from_numpy(arr.astype(np.float32))
        off += 4 * n
    model.load_state_dict(state)
    return model, meta
