"""Asymmetric fitting gaps: deform a source toward a target, then measure what is left.

The table file is an append-only log of fixed-size checksummed records, so a
long precompute can be killed and resumed without losing finished pairs.
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import distance_field as udf
from .deform import DeformationError, DeformationProblem, SolverOptions, deform
from .geometry import ShapeRecord, chamfer_pm, chamfer_pp, sample_surface

log = logging.getLogger(__name__)

MAGIC = b"DFGT"
VERSION = 1
_HEAD = struct.Struct("<4sH")
_REC = struct.Struct("<IIdd")
_CRC = struct.Struct("<I")
RECORD_SIZE = _REC.size + _CRC.size

N_NEAREST = 50
N_RANDOM = 50


class TableFormatError(ValueError):
    pass


class FitGapError(RuntimeError):
    def __init__(self, src: int, tgt: int, cause: Exception):
        super().__init__(f"pair ({src} -> {tgt}) failed: {cause}")
        self.src, self.tgt, self.cause = src, tgt, cause


@dataclass
class GapEntry:
    e_train: float
    e_eval: float = math.nan

    @property
    def has_eval(self) -> bool:
        return not math.isnan(self.e_eval)


@dataclass
class FitGapTable:
    """Sparse map (source_id, target_id) -> gaps. No symmetry is assumed."""

    entries: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __getitem__(self, key) -> GapEntry:
        return self.entries[key]

    def set(self, src: int, tgt: int, e_train: float, e_eval: float = math.nan) -> None:
        if not e_train >= 0 or (not math.isnan(e_eval) and e_eval < 0):
            raise ValueError(f"negative or invalid gap for ({src}, {tgt})")
        self.entries[(int(src), int(tgt))] = GapEntry(float(e_train), float(e_eval))

    def get(self, src: int, tgt: int, default=None):
        return self.entries.get((src, tgt), default)

    def sources_of(self, tgt: int) -> list[int]:
        return sorted(s for (s, t) in self.entries if t == tgt)

    def targets(self) -> list[int]:
        return sorted({t for (_, t) in self.entries})

    def gaps_for(self, tgt: int) -> tuple[np.ndarray, np.ndarray]:
        src = self.sources_of(tgt)
        return np.array(src, dtype=np.int64), np.array([self.entries[(s, tgt)].e_train for s in src])

    def __eq__(self, other) -> bool:
        if not isinstance(other, FitGapTable) or self.entries.keys() != other.entries.keys():
            return False
        for k, a in self.entries.items():
            b = other.entries[k]
            if a.e_train != b.e_train:
                return False
            if not (a.e_eval == b.e_eval or (math.isnan(a.e_eval) and math.isnan(b.e_eval))):
                return False
        return True


def _pack(src: int, tgt: int, entry: GapEntry) -> bytes:
    body = _REC.pack(src, tgt, entry.e_train, entry.e_eval)
    return body + _CRC.pack(zlib.crc32(body))


def save_table(path, table: FitGapTable) -> None:
    """Write a compact table, records sorted by (target, source)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION))
        for (s, t) in sorted(table.entries, key=lambda k: (k[1], k[0])):
            fh.write(_pack(s, t, table.entries[(s, t)]))
    tmp.replace(path)


def load_table(path, allow_partial_tail: bool = False) -> FitGapTable:
    """Read a table or an append log; later records override earlier ones."""
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise TableFormatError("truncated table header")
    magic, version = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise TableFormatError(f"bad table magic {magic!r}")
    if version != VERSION:
        raise TableFormatError(f"unsupported table version {version} (expected {VERSION})")
    body = data[_HEAD.size:]
    n, rest = divmod(len(body), RECORD_SIZE)
    if rest and not allow_partial_tail:
        raise TableFormatError(f"truncated table: {rest} trailing bytes")
    table = FitGapTable()
    for i in range(n):
        off = i * RECORD_SIZE
        rec = body[off:off + _REC.size]
        (crc,) = _CRC.unpack_from(body, off + _REC.size)
        if zlib.crc32(rec) != crc:
            if allow_partial_tail and i == n - 1:
                break
            raise TableFormatError(f"checksum mismatch in record {i}")
        s, t, e_train, e_eval = _REC.unpack(rec)
        table.entries[(s, t)] = GapEntry(e_train, e_eval)
    return table


class TableLog:
    """Append-only writer; the single serialization point of a precompute run."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.write_bytes(_HEAD.pack(MAGIC, VERSION))
        else:
            size = self.path.stat().st_size
            extra = (size - _HEAD.size) % RECORD_SIZE
            if extra:
                # drop a record torn by an interrupted write
                with open(self.path, "r+b") as fh:
                    fh.truncate(size - extra)

    def read(self) -> FitGapTable:
        return load_table(self.path, allow_partial_tail=True)

    def append(self, src: int, tgt: int, entry: GapEntry) -> None:
        with open(self.path, "ab") as fh:
            fh.write(_pack(src, tgt, entry))


@dataclass
class PairSampling:
    """X_t for every target t: nearest shapes by point-to-point Chamfer plus random others."""

    sources: dict
    seed: int = 0

    def pairs(self) -> list[tuple[int, int]]:
        return [(s, t) for t in sorted(self.sources) for s in self.sources[t]]


def chamfer_matrix(db: list[ShapeRecord]) -> np.ndarray:
    """d[i, j] = chamfer_pp between training clouds of db[i] and db[j] (symmetric)."""
    n = len(db)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = chamfer_pp(db[i].cloud_train, db[j].cloud_train)
    return d


def sample_pairs(db: list[ShapeRecord], seed: int, n_nearest: int = N_NEAREST, n_random: int = N_RANDOM,
                 distances: Optional[np.ndarray] = None) -> PairSampling:
    if len(db) < 2:
        raise ValueError("need at least two shapes to sample pairs")
    ids = np.array([s.id for s in db], dtype=np.int64)
    d = chamfer_matrix(db) if distances is None else distances
    rng = np.random.default_rng(seed)
    budget = n_nearest + n_random
    out = {}
    for i, t in enumerate(ids):
        others = np.array([j for j in range(len(db)) if j != i])
        if len(others) <= budget:
            out[int(t)] = sorted(int(ids[j]) for j in others)
            continue
        # stable sort; equal distances fall back to lower db position
        order = others[np.argsort(d[i, others], kind="stable")]
        near = order[:n_nearest]
        pool = order[n_nearest:]
        rand = rng.choice(pool, size=min(n_random, len(pool)), replace=False)
        out[int(t)] = sorted(int(ids[j]) for j in np.concatenate([near, rand]))
    return PairSampling(out, seed)


def identity_tolerance(grid: udf.UnsignedDistanceGrid) -> float:
    """Bound on e(t, t): every resampled point stays within one cell of its twin."""
    return 2.0 * grid.cell_size ** 2


@dataclass
class GapConfig:
    resolution: int = udf.DEFAULT_RESOLUTION
    lam: float = 1.0
    solver: SolverOptions = field(default_factory=SolverOptions)
    squared: bool = True
    with_eval: bool = False


def deform_pair(s: ShapeRecord, t: ShapeRecord, grid: udf.UnsignedDistanceGrid, cfg: GapConfig):
    problem = DeformationProblem(s.mesh, grid, cfg.lam)
    return deform(problem, cfg.solver)


def gap_from_result(s: ShapeRecord, t: ShapeRecord, deformed, cfg: GapConfig) -> GapEntry:
    """Resample the deformed source with its own training seed and compare to t."""
    seed = s.cloud_train.seed if s.cloud_train is not None and s.cloud_train.seed is not None else 0
    n = len(t.cloud_train)
    cloud = sample_surface(deformed.mesh, n, seed)
    e_train = chamfer_pp(cloud, t.cloud_train, squared=cfg.squared)
    e_eval = math.nan
    if cfg.with_eval:
        if t.cloud_eval is None:
            raise ValueError(f"shape {t.id} has no evaluation cloud")
        dense = sample_surface(deformed.mesh, len(t.cloud_eval), seed + 1, s.id)
        e_eval = chamfer_pm(ShapeRecord(s.id, deformed.mesh, cloud, dense, s.name), t, squared=cfg.squared)
    return GapEntry(e_train, e_eval)


def compute_fitgap(s: ShapeRecord, t: ShapeRecord, opts: SolverOptions | None = None,
                   grid: udf.UnsignedDistanceGrid | None = None, cfg: GapConfig | None = None) -> float:
    """e(s, t) = chamfer_pp(D(s; t), t) on the training clouds."""
    cfg = cfg or GapConfig()
    if opts is not None:
        cfg = GapConfig(cfg.resolution, cfg.lam, opts, cfg.squared, cfg.with_eval)
    grid = grid or udf.build_udf(t, cfg.resolution)
    try:
        res = deform_pair(s, t, grid, cfg)
    except DeformationError as exc:
        raise FitGapError(s.id, t.id, exc) from exc
    return gap_from_result(s, t, res, cfg).e_train


def _target_job(args):
    t, sources, cfg = args
    grid = udf.build_udf(t, cfg.resolution)
    out = []
    for s in sources:
        try:
            res = deform_pair(s, t, grid, cfg)
            out.append((s.id, t.id, gap_from_result(s, t, res, cfg), None))
        except DeformationError as exc:
            out.append((s.id, t.id, None, str(FitGapError(s.id, t.id, exc))))
    return out


@dataclass
class PrecomputeReport:
    computed: int = 0
    skipped: int = 0
    failures: list = field(default_factory=list)


def precompute(db: list[ShapeRecord], sampling: PairSampling, cfg: GapConfig | None = None,
               log_path=None, workers: int = 1, limit: Optional[int] = None,
               progress: Optional[Callable[[int, int], None]] = None) -> tuple[FitGapTable, PrecomputeReport]:
    """Fill the table for every (s, t) with s in X_t.

    With ``log_path`` the run is resumable: finished pairs are read back and
    skipped. ``limit`` stops after that many new pairs (used to exercise
    resumption). Failed pairs are reported and the run continues.
    """
    cfg = cfg or GapConfig()
    by_id = {s.id: s for s in db}
    missing = [i for t in sampling.sources for i in [t, *sampling.sources[t]] if i not in by_id]
    if missing:
        raise ValueError(f"sampling refers to shapes not in the database: {sorted(set(missing))[:5]}")
    tlog = TableLog(log_path) if log_path is not None else None
    table = tlog.read() if tlog else FitGapTable()
    report = PrecomputeReport()
    jobs = []
    budget = math.inf if limit is None else limit
    for t in sorted(sampling.sources):
        todo = []
        for s in sampling.sources[t]:
            e = table.get(s, t)
            if e is not None and (e.has_eval or not cfg.with_eval):
                report.skipped += 1
                continue
            if budget <= 0:
                break
            todo.append(by_id[s])
            budget -= 1
        if todo:
            jobs.append((by_id[t], todo, cfg))
    total = sum(len(j[1]) for j in jobs)

    def consume(results):
        for s, t, entry, err in results:
            if err is not None:
                log.warning(err)
                report.failures.append(err)
                continue
            table.entries[(s, t)] = entry
            if tlog:
                tlog.append(s, t, entry)
            report.computed += 1
            if progress:
                progress(report.computed, total)

    if workers <= 1:
        for job in jobs:
            consume(_target_job(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for results in pool.map(_target_job, jobs):
                consume(results)
    return table, report
