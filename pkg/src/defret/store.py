"""On-disk shape store written by ``ingest`` and read by every later stage.

Layout::

    store/index.json            shape list, sources, seeds, config hash
    store/meshes/<id>.obj       normalized mesh (lossless %.17g)
    store/clouds/<id>.train     DRPC float32 cloud
    store/clouds/<id>.eval      DRPC float32 cloud
    store/errors.json           files that failed to load (if any)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .geometry import (
    MeshError,
    PointCloud,
    ShapeRecord,
    load_mesh,
    make_record,
    normalize,
    read_cloud_bin,
    write_cloud_bin,
    write_obj,
)

INDEX = "index.json"


def derive_seed(root: int, stage: str) -> int:
    """Per-stage seed: first 4 bytes of sha256("<root>/<stage>"), little endian."""
    return int.from_bytes(hashlib.sha256(f"{int(root)}/{stage}".encode()).digest()[:4], "little")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_manifest(path) -> list[dict]:
    items = json.loads(Path(path).read_text())
    if not isinstance(items, list):
        raise ValueError("manifest must be a JSON array of {id, path, split}")
    base = Path(path).parent
    out = []
    seen = set()
    for it in items:
        if not isinstance(it, dict) or "id" not in it or "path" not in it:
            raise ValueError(f"bad manifest entry {it!r}")
        sid = int(it["id"])
        if sid in seen or sid < 0:
            raise ValueError(f"duplicate or negative shape id {sid}")
        seen.add(sid)
        p = Path(it["path"])
        out.append({"id": sid, "path": str(p if p.is_absolute() else base / p), "split": it.get("split", "train")})
    return out


@dataclass
class IngestReport:
    added: list
    unchanged: list
    errors: list


def ingest(manifest: list[dict], store_dir, seed: int, n_train: int, n_eval: int, chash: str) -> IngestReport:
    store = Path(store_dir)
    (store / "meshes").mkdir(parents=True, exist_ok=True)
    (store / "clouds").mkdir(parents=True, exist_ok=True)
    index = _read_index(store)
    known = {e["id"]: e for e in index.get("shapes", [])}
    report = IngestReport([], [], [])
    for item in manifest:
        sid = item["id"]
        try:
            digest = file_sha256(item["path"])
        except OSError as exc:
            report.errors.append({"id": sid, "path": item["path"], "error": str(exc)})
            continue
        prev = known.get(sid)
        shape_seed = derive_seed(seed, f"ingest/{sid}")
        if (prev and prev["sha256"] == digest and prev["split"] == item["split"] and prev["seed"] == shape_seed
                and prev["n_train"] == n_train
                and prev["n_eval"] == n_eval and all((store / prev[k]).exists() for k in ("mesh", "train", "eval"))):
            report.unchanged.append(sid)
            continue
        try:
            mesh = normalize(load_mesh(item["path"]))
        except (MeshError, OSError, ValueError) as exc:
            report.errors.append({"id": sid, "path": item["path"], "error": str(exc)})
            continue
        rec = make_record(sid, mesh, shape_seed, Path(item["path"]).stem, n_train, n_eval)
        entry = {"id": sid, "name": rec.name, "split": item["split"], "source": item["path"], "sha256": digest,
                 "seed": shape_seed, "n_train": n_train, "n_eval": n_eval,
                 "mesh": f"meshes/{sid}.obj", "train": f"clouds/{sid}.train", "eval": f"clouds/{sid}.eval"}
        write_obj(store / entry["mesh"], mesh)
        write_cloud_bin(store / entry["train"], rec.cloud_train)
        write_cloud_bin(store / entry["eval"], rec.cloud_eval)
        known[sid] = entry
        report.added.append(sid)
    index = {"config_hash": chash, "shapes": [known[k] for k in sorted(known)]}
    _write_json(store / INDEX, index)
    err_path = store / "errors.json"
    if report.errors:
        _write_json(err_path, report.errors)
    elif err_path.exists():
        err_path.unlink()
    return report


def _read_index(store: Path) -> dict:
    p = store / INDEX
    return json.loads(p.read_text()) if p.exists() else {}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def store_digest(store_dir) -> str:
    index = _read_index(Path(store_dir))
    return config_hash({"shapes": [(e["id"], e["sha256"], e["seed"], e["split"]) for e in index.get("shapes", [])]})


def load_store(store_dir, split: Optional[str] = None, with_eval: bool = True) -> list[ShapeRecord]:
    store = Path(store_dir)
    index = _read_index(store)
    if not index:
        raise FileNotFoundError(f"{store}: no shape store (run ingest first)")
    out = []
    for e in index["shapes"]:
        if split is not None and e["split"] != split:
            continue
        mesh = load_mesh(store / e["mesh"])
        train = read_cloud_bin(store / e["train"])
        cloud_train = PointCloud(train.points, e["id"], e["seed"])
        cloud_eval = None
        if with_eval:
            ev = read_cloud_bin(store / e["eval"])
            cloud_eval = PointCloud(ev.points, e["id"], e["seed"] + 1)
        out.append(ShapeRecord(e["id"], mesh, cloud_train, cloud_eval, e["name"]))
    return out
