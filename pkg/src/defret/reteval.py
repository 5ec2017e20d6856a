"""Retrieval by observer distance, the Chamfer baseline, and the evaluation protocols.

Per query we report d^m and e^m of the top-1 and the best of the top-3
retrievals, the rank of the top-1 inside a candidate pool ordered by the true
fitting gap, and whether that rank is within the first five.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import distance_field as udf
from .embed import EgocentricCode, EmbeddingModel, code, weights_digest
from .fitgap import FitGapTable, GapConfig, GapEntry, TableLog, deform_pair, gap_from_result
from .geometry import ShapeRecord, chamfer_pm, chamfer_pp
from .synthetic import FamilyParams, generate_synthetic  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

MAGIC = b"DRIX"
VERSION = 1
N_RANK = 150
RECALL_TOP = 5
PAPER_SCALE = 1e2  # values reported in units of 1e-2


class IndexFormatError(ValueError):
    pass


@dataclass
class RetrievalIndex:
    ids: np.ndarray
    z: np.ndarray
    g: np.ndarray
    model_digest: str = ""

    def __post_init__(self):
        if not (len(self.ids) == len(self.z) == len(self.g)):
            raise ValueError("index arrays differ in length")
        if not np.all(self.g > 0):
            raise ValueError("index fields must be strictly positive")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def k(self) -> int:
        return self.z.shape[1]

    def code_of(self, shape_id: int) -> EgocentricCode:
        i = int(np.flatnonzero(self.ids == shape_id)[0])
        return EgocentricCode(self.z[i], self.g[i])


def build_index(db: Sequence[ShapeRecord], model: EmbeddingModel) -> RetrievalIndex:
    codes = [code(model, s, with_field=True) for s in db]
    return RetrievalIndex(
        np.array([s.id for s in db], dtype=np.int64),
        np.stack([c.z for c in codes]),
        np.stack([c.g for c in codes]),
        weights_digest(model),
    )


def index_nbytes(n: int, k: int) -> int:
    return len(MAGIC) + 2 + 4 + 4 + n * 2 * k * 4 + n * 4


def save_index(path, index: RetrievalIndex) -> None:
    n, k = index.z.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HII", VERSION, n, k))
        fh.write(index.z.astype("<f4").tobytes())
        fh.write(index.g.astype("<f4").tobytes())
        fh.write(index.ids.astype("<u4").tobytes())


def load_index(path) -> RetrievalIndex:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise IndexFormatError("bad index magic")
    version, n, k = struct.unpack_from("<HII", data, 4)
    if version != VERSION:
        raise IndexFormatError(f"unsupported index version {version}")
    if len(data) != index_nbytes(n, k):
        raise IndexFormatError("index file size does not match its header")
    off = 14
    z = np.frombuffer(data, "<f4", n * k, off).reshape(n, k).astype(np.float64)
    g = np.frombuffer(data, "<f4", n * k, off + 4 * n * k).reshape(n, k).astype(np.float64)
    ids = np.frombuffer(data, "<u4", n, off + 8 * n * k).astype(np.int64)
    return RetrievalIndex(ids, z, g)


def _ranked(ids: np.ndarray, scores: np.ndarray, n: Optional[int]) -> list[tuple[int, float]]:
    order = np.lexsort((ids, scores))
    if n is not None:
        order = order[:n]
    return [(int(ids[i]), float(scores[i])) for i in order]


def retrieve_code(query: EgocentricCode, index: RetrievalIndex, n: Optional[int] = None,
                  exclude: Sequence[int] = (), candidates: Optional[Sequence[int]] = None) -> list[tuple[int, float]]:
    """(id, delta) ascending, each database shape observing the query with its own field."""
    if query.z.shape != (index.k,):
        raise ValueError(f"query code has dimension {query.z.shape}, index has {index.k}")
    keep = ~np.isin(index.ids, np.asarray(list(exclude), dtype=np.int64))
    if candidates is not None:
        keep &= np.isin(index.ids, np.asarray(list(candidates), dtype=np.int64))
    d = query.z[None, :] - index.z[keep]
    dist = np.sqrt(np.sum(index.g[keep] * d * d, axis=1))
    return _ranked(index.ids[keep], dist, n)


def retrieve(query: ShapeRecord, index: RetrievalIndex, model: EmbeddingModel, n: Optional[int] = None,
             exclude: Sequence[int] = (), candidates: Optional[Sequence[int]] = None) -> list[tuple[int, float]]:
    return retrieve_code(code(model, query, with_field=False), index, n, exclude, candidates)


def ranked_cd_baseline(query: ShapeRecord, db: Sequence[ShapeRecord], n: Optional[int] = None,
                       exclude: Sequence[int] = (), candidates: Optional[Sequence[int]] = None) -> list[tuple[int, float]]:
    """Database shapes by ascending chamfer_pp to the query, before any deformation."""
    skip = set(exclude)
    allowed = None if candidates is None else set(candidates)
    pool = [s for s in db if s.id not in skip and (allowed is None or s.id in allowed)]
    ids = np.array([s.id for s in pool], dtype=np.int64)
    cd = np.array([chamfer_pp(query.cloud_train, s.cloud_train) for s in pool])
    return _ranked(ids, cd, n)


# lazily filled gap store used by the evaluation

class GapStore:
    """Fitting gaps for (database, query) pairs, computed on demand.

    e_train is kept in a FitGapTable (optionally backed by an append log);
    e^m fills the e_eval slot. Undeformed d^m is memoised in memory.
    """

    def __init__(self, by_id: dict, cfg: GapConfig | None = None, table: FitGapTable | None = None,
                 log_path=None, max_grids: int = 4):
        self.by_id = by_id
        self.cfg = cfg or GapConfig()
        self.log = TableLog(log_path) if log_path is not None else None
        self.table = table if table is not None else (self.log.read() if self.log else FitGapTable())
        self._grids: dict = {}
        self._max_grids = max_grids
        self._dm: dict = {}
        self.computed = 0

    def grid(self, tgt: int):
        if tgt not in self._grids:
            if len(self._grids) >= self._max_grids:
                self._grids.pop(next(iter(self._grids)))
            self._grids[tgt] = udf.build_udf(self.by_id[tgt], self.cfg.resolution)
        return self._grids[tgt]

    def _fill(self, s: int, t: int, with_eval: bool) -> GapEntry:
        src, tgt = self.by_id[s], self.by_id[t]
        cfg = GapConfig(self.cfg.resolution, self.cfg.lam, self.cfg.solver, self.cfg.squared, with_eval)
        res = deform_pair(src, tgt, self.grid(t), cfg)
        entry = gap_from_result(src, tgt, res, cfg)
        self.table.entries[(s, t)] = entry
        if self.log:
            self.log.append(s, t, entry)
        self.computed += 1
        return entry

    def e_train(self, s: int, t: int) -> float:
        e = self.table.get(s, t)
        return (e if e is not None else self._fill(s, t, False)).e_train

    def e_eval(self, s: int, t: int) -> float:
        e = self.table.get(s, t)
        if e is None or not e.has_eval:
            e = self._fill(s, t, True)
        return e.e_eval

    def d_eval(self, s: int, t: int) -> float:
        key = (min(s, t), max(s, t))
        if key not in self._dm:
            self._dm[key] = chamfer_pm(self.by_id[s], self.by_id[t], squared=self.cfg.squared)
        return self._dm[key]


# reports

@dataclass
class QueryMetrics:
    query: int
    top_ids: list
    top1_dm: float
    top3_dm: float
    top1_em: float
    top3_em: float
    rank: int
    recall1: bool
    pool_size: int


@dataclass
class MetricsReport:
    method: str
    rows: list = field(default_factory=list)
    n_rank: int = N_RANK
    seed: int = 0
    config_hash: str = ""

    COLUMNS = ("top1_dm", "top3_dm", "top1_em", "top3_em", "rank", "recall1")

    def aggregate(self) -> dict:
        if not self.rows:
            return {c: math.nan for c in self.COLUMNS}
        out = {}
        for c in self.COLUMNS:
            out[c] = float(np.mean([float(getattr(r, c)) for r in self.rows]))
        return out

    @property
    def mean_rank(self) -> float:
        return self.aggregate()["rank"]

    def write_csv(self, path, paper_scale: bool = False, columns: Sequence[str] = COLUMNS) -> None:
        s = PAPER_SCALE if paper_scale else 1.0

        def cell(r, c):
            v = getattr(r, c)
            if c.endswith(("_dm", "_em")):
                return repr(v * s)
            return int(v)

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_hash", "seed", "method", "query", "top_ids", *columns, "pool_size"])
            for r in self.rows:
                w.writerow([self.config_hash, self.seed, self.method, r.query, " ".join(map(str, r.top_ids)),
                            *(cell(r, c) for c in columns), r.pool_size])

    def summary(self, paper_scale: bool = False) -> dict:
        agg = self.aggregate()
        if paper_scale:
            for c in ("top1_dm", "top3_dm", "top1_em", "top3_em"):
                agg[c] *= PAPER_SCALE
        return {"method": self.method, "config_hash": self.config_hash, "seed": self.seed, "n_rank": self.n_rank,
                "queries": len(self.rows), "paper_scale": paper_scale, "means": agg}

    def write_json(self, path, paper_scale: bool = False) -> None:
        Path(path).write_text(json.dumps(self.summary(paper_scale), indent=2, sort_keys=True) + "\n")


Ranker = Callable[[ShapeRecord, Optional[Sequence[int]]], list]


def candidate_pool(query: int, db_ids: Sequence[int], table: Optional[FitGapTable], n_rank: int,
                   seed: int) -> list[int]:
    """The query's precomputed candidates when there are any, else a fresh seeded sample."""
    db_set = set(db_ids)
    pool = [s for s in table.sources_of(query) if s in db_set and s != query] if table is not None else []
    if not pool:
        pool = sorted(s for s in db_set if s != query)
    if len(pool) > n_rank:
        rng = np.random.default_rng([seed, query])
        pool = sorted(int(x) for x in rng.choice(pool, size=n_rank, replace=False))
    return pool


def rank_in_pool(chosen: int, pool: Sequence[int], gap: Callable[[int], float]) -> int:
    """1 + number of pool members that fit strictly better than ``chosen``."""
    g = gap(chosen)
    return 1 + sum(1 for s in pool if gap(s) < g)


def evaluate(queries: Sequence[ShapeRecord], db: Sequence[ShapeRecord], rankers: dict, store: GapStore,
             n_rank: int = N_RANK, seed: int = 0, top_n: int = 3, config_hash: str = "",
             pool_table: Optional[FitGapTable] = None) -> dict:
    """One MetricsReport per ranker.

    A ranker maps (query, candidate ids or None) to a ranked list of
    (id, score). Table-1 metrics use retrieval over the whole database; the
    rank metrics use retrieval restricted to the query's candidate pool,
    ordered by the evaluation gap e^m. The pool is the query's sampled
    sources in ``pool_table`` when it has any, else a seeded draw from the
    database.
    """
    db_ids = [s.id for s in db]
    reports = {name: MetricsReport(name, n_rank=n_rank, seed=seed, config_hash=config_hash) for name in rankers}
    for q in queries:
        pool = candidate_pool(q.id, db_ids, pool_table, n_rank, seed)
        if len(pool) < n_rank:
            log.info("query %d: %d candidates available for a %d pool", q.id, len(pool), n_rank)
        for name, rank_fn in rankers.items():
            top = [i for i, _ in rank_fn(q, None)[:top_n]]
            dm = [store.d_eval(s, q.id) for s in top]
            em = [store.e_eval(s, q.id) for s in top]
            first = rank_fn(q, pool)[0][0]
            rank = rank_in_pool(first, pool, lambda s: store.e_eval(s, q.id))
            reports[name].rows.append(QueryMetrics(q.id, top, dm[0], min(dm), em[0], min(em), rank,
                                                   rank <= RECALL_TOP, len(pool)))
    return reports


def model_ranker(model: EmbeddingModel, index: RetrievalIndex) -> Ranker:
    def rank(q: ShapeRecord, candidates=None):
        return retrieve(q, index, model, None, exclude=(q.id,), candidates=candidates)
    return rank


def cd_ranker(db: Sequence[ShapeRecord]) -> Ranker:
    cache: dict = {}

    def rank(q: ShapeRecord, candidates=None):
        if q.id not in cache:
            cache[q.id] = ranked_cd_baseline(q, db, None, exclude=(q.id,))
        full = cache[q.id]
        if candidates is None:
            return full
        allowed = set(candidates)
        return [x for x in full if x[0] in allowed]
    return rank


def oracle_ranker(store: GapStore, db_ids: Sequence[int]) -> Ranker:
    """Ranks by the true evaluation gap e^m; an upper bound for every protocol."""
    def rank(q: ShapeRecord, candidates=None):
        cand = candidates if candidates is not None else [s for s in db_ids if s != q.id]
        ids = np.array(sorted(cand), dtype=np.int64)
        return _ranked(ids, np.array([store.e_eval(int(s), q.id) for s in ids]), None)
    return rank
