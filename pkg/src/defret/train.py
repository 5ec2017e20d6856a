"""Training the embedding from precomputed fitting gaps.

Two strategies share the loop: a hinge over positive/negative sets and an
L1 regression of observer-distance probabilities onto gap probabilities.
"""

from __future__ import annotations

import csv
import ctypes
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .embed import Architecture, EmbeddingModel, batch_tensor, delta, delta_sq, save_checkpoint, shape_points
from .fitgap import FitGapTable
from .geometry import ShapeRecord

log = logging.getLogger(__name__)

ETA = 1e-8
STRATEGIES = ("margin", "regression")
PROB_MODES = ("consistent", "literal")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    sigma_p: float = 3e-4
    sigma_n: float = 6e-4
    margin: float = 10.0
    perplexity: float = 5.0
    batch_queries: int = 8
    n_pos: int = 2
    n_neg: int = 13
    n_reg: int = 15
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 350
    seed: int = 0
    prob_mode: str = "consistent"
    k: int = 256
    point_widths: tuple = (64, 128, 256)
    head_widths: tuple = (256,)
    input_points: int = 2048
    mining_start: int = 30
    mining_every: int = 10
    n_hard: int = 8

    def validate(self) -> None:
        if not self.sigma_p < self.sigma_n:
            raise ValueError(f"sigma_p ({self.sigma_p}) must be smaller than sigma_n ({self.sigma_n})")
        if self.perplexity < 2:
            raise ValueError("perplexity must be at least 2")
        for name in ("batch_queries", "n_pos", "n_neg", "n_reg", "epochs", "k", "input_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_hard > self.n_neg:
            raise ValueError("n_hard cannot exceed n_neg")
        if not self.learning_rate > 0 or self.margin < 0:
            raise ValueError("learning_rate must be positive and margin non-negative")
        if self.prob_mode not in PROB_MODES:
            raise ValueError(f"prob_mode must be one of {PROB_MODES}")

    @property
    def architecture(self) -> Architecture:
        return Architecture(self.k, tuple(self.point_widths), tuple(self.head_widths), self.input_points)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["point_widths"] = list(self.point_widths)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training options: {sorted(extra)}")
        d = dict(d)
        for key in ("point_widths", "head_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# losses and probabilities

def margin_loss(d_pos: torch.Tensor, d_neg: torch.Tensor, margin: float) -> torch.Tensor:
    """mean over negatives of [max_p d_pos - d_neg + margin]_+."""
    if d_pos.numel() == 0 or d_neg.numel() == 0:
        raise ValueError("margin loss needs at least one positive and one negative")
    return torch.relu(d_pos.max() - d_neg + margin).mean()


def entropy_bits(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz)))


def target_probs(e_values, sigma: float) -> np.ndarray:
    """softmax(-e^2 / (2 sigma^2)), shifted by the max exponent for stability."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    e = np.asarray(e_values, dtype=np.float64)
    logits = -(e * e) / (2.0 * sigma * sigma)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


@dataclass
class Bandwidth:
    sigma: float
    entropy: float
    degenerate: bool = False


def calibrate_sigma(e_values, tau: float, tol: float = 1e-6, max_iter: int = 200) -> Bandwidth:
    """Bisect log(sigma) until the entropy of :func:`target_probs` equals log2(tau)."""
    e = np.asarray(e_values, dtype=np.float64)
    if e.size < 2:
        raise ValueError("need at least two gap values")
    if not 1 < tau:
        raise ValueError("perplexity must exceed 1")
    if np.all(e == e[0]):
        return Bandwidth(1.0, math.log2(e.size), True)
    goal = math.log2(tau)
    sq = e * e
    spread = float(sq.max() - sq.min())
    # entropy rises monotonically with sigma, from log2(#minimisers) to log2(n)
    lo, hi = math.log(math.sqrt(spread) * 1e-6 + 1e-300), math.log(math.sqrt(spread) * 1e6)
    h_lo = entropy_bits(target_probs(e, math.exp(lo)))
    h_hi = entropy_bits(target_probs(e, math.exp(hi)))
    if goal <= h_lo or goal >= h_hi:
        sig = math.exp(lo if goal <= h_lo else hi)
        log.warning("perplexity %.3g unreachable on these gaps; clamped", tau)
        return Bandwidth(sig, entropy_bits(target_probs(e, sig)), True)
    h = h_lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        h = entropy_bits(target_probs(e, math.exp(mid)))
        if abs(h - goal) < tol:
            return Bandwidth(math.exp(mid), h, False)
        if h < goal:
            lo = mid
        else:
            hi = mid
    sig = math.exp(0.5 * (lo + hi))
    return Bandwidth(sig, entropy_bits(target_probs(e, sig)), False)


def predicted_probs_sq(dsq: torch.Tensor, mode: str = "consistent", eta: float = ETA) -> torch.Tensor:
    """Probabilities from squared observer distances."""
    if mode == "consistent":
        w = 1.0 / (dsq + eta)
        return w / w.sum()
    if mode == "literal":
        total = dsq.sum()
        uniform = torch.full_like(dsq, 1.0 / dsq.numel())
        safe = torch.where(total > 0, total, torch.ones_like(total))
        return torch.where(total > 0, dsq / safe, uniform)
    raise ValueError(f"unknown prob_mode {mode!r}")


def predicted_probs(deltas, mode: str = "consistent", eta: float = ETA):
    """Literal: delta^2 / sum delta^2. Consistent: normalised 1 / (delta^2 + eta)."""
    if isinstance(deltas, torch.Tensor):
        return predicted_probs_sq(deltas * deltas, mode, eta)
    d = torch.as_tensor(np.asarray(deltas, dtype=np.float64))
    return predicted_probs_sq(d * d, mode, eta).numpy()


def reg_loss(p_hat: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    return (p_hat - p).abs().mean()


# optimiser

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise TrainingError("non-finite gradient")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)


# batches

@dataclass
class TripletBatch:
    query: int
    positives: list
    negatives: list

    def __post_init__(self):
        if set(self.positives) & set(self.negatives):
            raise ValueError("positives and negatives overlap")


@dataclass
class RegBatch:
    query: int
    sources: list
    probs: np.ndarray
    sigma: float


def _take(pool: Sequence[int], n: int, rng: np.random.Generator) -> list[int]:
    """n distinct draws when possible; a short pool is used whole, then padded by redraws."""
    pool = list(pool)
    if len(pool) >= n:
        return [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
    pad = [pool[i] for i in rng.integers(0, len(pool), size=n - len(pool))]
    return pool + pad


@dataclass
class QuerySets:
    """Per-query candidate data derived from the table once, before training."""

    sources: np.ndarray
    gaps: np.ndarray
    positives: list
    negatives: list
    sigma: float = 1.0


def query_sets(table: FitGapTable, queries: Sequence[int], cfg: TrainConfig, db_ids: set) -> dict:
    out = {}
    for t in queries:
        src, gaps = table.gaps_for(t)
        keep = np.array([s in db_ids and s != t for s in src], dtype=bool)
        src, gaps = src[keep], gaps[keep]
        if len(src) == 0:
            continue
        pos = [int(s) for s, e in zip(src, gaps) if e <= cfg.sigma_p]
        neg = [int(s) for s, e in zip(src, gaps) if e > cfg.sigma_n]
        sigma = calibrate_sigma(gaps, cfg.perplexity).sigma if len(src) >= 2 else 1.0
        out[int(t)] = QuerySets(src, gaps, pos, neg, sigma)
    return out


def reg_batch(t: int, qs: QuerySets, n_reg: int, rng: np.random.Generator) -> RegBatch:
    n = min(n_reg, len(qs.sources))
    pick = np.sort(rng.choice(len(qs.sources), size=n, replace=False))
    return RegBatch(t, [int(s) for s in qs.sources[pick]], target_probs(qs.gaps[pick], qs.sigma), qs.sigma)


class NegativeMiner:
    """Caches codes of every database shape and proposes hard negatives."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.z: dict = {}
        self.g: dict = {}
        self.cached_epoch: Optional[int] = None

    def active(self, epoch: int) -> bool:
        return epoch >= self.cfg.mining_start

    def due(self, epoch: int) -> bool:
        if not self.active(epoch):
            return False
        if self.cached_epoch is None:
            return True
        return (epoch - self.cfg.mining_start) % self.cfg.mining_every == 0 and self.cached_epoch != epoch

    def refresh(self, model: EmbeddingModel, db: Sequence[ShapeRecord], epoch: int) -> None:
        with torch.no_grad():
            z, g = model(batch_tensor(model, [shape_points(model, s) for s in db]))
        for i, s in enumerate(db):
            self.z[s.id] = z[i].double().numpy()
            self.g[s.id] = g[i].double().numpy()
        self.cached_epoch = epoch

    def distances(self, t: int, candidates: Sequence[int]) -> np.ndarray:
        zt = self.z[t]
        return np.array([math.sqrt(float(np.sum(self.g[s] * (zt - self.z[s]) ** 2))) for s in candidates])

    def hardest(self, t: int, candidates: Sequence[int], n: int) -> list[int]:
        """The n candidates with the smallest cached distance; ties to the lower id."""
        cand = np.asarray(candidates, dtype=np.int64)
        d = self.distances(t, cand)
        order = np.lexsort((cand, d))
        return [int(c) for c in cand[order[:n]]]

    def sample(self, t: int, negatives: Sequence[int], rng: np.random.Generator) -> list[int]:
        n_neg, n_hard = self.cfg.n_neg, self.cfg.n_hard
        if len(negatives) < n_neg:
            return _take(negatives, n_neg, rng)
        hard = self.hardest(t, negatives, n_hard)
        rest = [s for s in negatives if s not in set(hard)]
        return hard + _take(rest, n_neg - n_hard, rng)


def triplet_batch(t: int, qs: QuerySets, cfg: TrainConfig, rng: np.random.Generator,
                  miner: Optional[NegativeMiner] = None, epoch: int = 0) -> TripletBatch:
    pos = _take(qs.positives, cfg.n_pos, rng)
    if miner is not None and miner.active(epoch):
        neg = miner.sample(t, qs.negatives, rng)
    else:
        neg = _take(qs.negatives, cfg.n_neg, rng)
    return TripletBatch(t, pos, neg)


# training loop

@dataclass
class EpochLog:
    epoch: int
    loss: float
    skipped_queries: int
    wall_time: float


def _keep_heap() -> None:
    # Large activations otherwise go through mmap/munmap on every step, and
    # fresh pages are very slow in some virtual machines.
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 2**31 - 1)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


def _step_loss(model, batches, cfg: TrainConfig, strategy: str, points: dict) -> torch.Tensor:
    ids = sorted({i for b in batches for i in ([b.query] + (b.positives + b.negatives if strategy == "margin" else b.sources))})
    pos = {s: i for i, s in enumerate(ids)}
    z, g = model(batch_tensor(model, [points[s] for s in ids]))
    losses = []
    for b in batches:
        zt = z[pos[b.query]]
        if strategy == "margin":
            ip = [pos[s] for s in b.positives]
            ineg = [pos[s] for s in b.negatives]
            losses.append(margin_loss(delta(zt, z[ip], g[ip]), delta(zt, z[ineg], g[ineg]), cfg.margin))
        else:
            isrc = [pos[s] for s in b.sources]
            p_hat = predicted_probs_sq(delta_sq(zt, z[isrc], g[isrc]), cfg.prob_mode)
            losses.append(reg_loss(p_hat, torch.as_tensor(b.probs, dtype=p_hat.dtype)))
    return torch.stack(losses).mean()


@dataclass
class TrainResult:
    model: EmbeddingModel
    history: list
    skipped: list


def train(db: Sequence[ShapeRecord], table: FitGapTable, cfg: TrainConfig, strategy: str = "regression",
          log_csv=None, checkpoint=None, meta: dict | None = None, threads: int = 1) -> TrainResult:
    """Fit F and G to the table. Deterministic for a fixed seed and thread count."""
    cfg.validate()
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    _keep_heap()
    torch.set_num_threads(threads)
    rng = np.random.default_rng(cfg.seed)
    model = EmbeddingModel(cfg.architecture, seed=cfg.seed)
    params = list(model.parameters())
    state = AdamState()
    by_id = {s.id: s for s in db}
    points = {s.id: shape_points(model, s) for s in db}
    sets = query_sets(table, sorted(by_id), cfg, set(by_id))
    if strategy == "margin":
        skipped = sorted(t for t, q in sets.items() if not q.positives or not q.negatives)
        queries = sorted(t for t in sets if t not in skipped)
        if skipped:
            log.warning("%d queries have an empty positive or negative set and are skipped", len(skipped))
    else:
        skipped = sorted(t for t, q in sets.items() if len(q.sources) < 2)
        queries = sorted(t for t in sets if t not in skipped)
    if not queries:
        raise TrainingError("no query has usable training pairs")
    miner = NegativeMiner(cfg) if strategy == "margin" else None
    history = []
    fh = writer = None
    if log_csv is not None:
        fh = open(log_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "skipped_queries", "wall_time"])
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            if miner is not None and miner.due(epoch):
                miner.refresh(model, db, epoch)
            order = rng.permutation(len(queries))
            total, count = 0.0, 0
            for start in range(0, len(order), cfg.batch_queries):
                chunk = [queries[i] for i in order[start:start + cfg.batch_queries]]
                if strategy == "margin":
                    batches = [triplet_batch(t, sets[t], cfg, rng, miner, epoch) for t in chunk]
                else:
                    batches = [reg_batch(t, sets[t], cfg.n_reg, rng) for t in chunk]
                loss = _step_loss(model, batches, cfg, strategy, points)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, queries {chunk}")
                grads = torch.autograd.grad(loss, params)
                adam_step(params, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
                total += float(loss.detach()) * len(chunk)
                count += len(chunk)
            rec = EpochLog(epoch, total / count, len(skipped), time.perf_counter() - t0)
            history.append(rec)
            if writer:
                writer.writerow([rec.epoch, repr(rec.loss), rec.skipped_queries, f"{rec.wall_time:.3f}"])
                fh.flush()
    finally:
        if fh:
            fh.close()
    if checkpoint is not None:
        info = {"epoch": cfg.epochs, "seed": cfg.seed, "strategy": strategy, "train_config": cfg.to_dict()}
        info.update(meta or {})
        save_checkpoint(checkpoint, model, info)
    return TrainResult(model, history, skipped)


def load_config(path) -> dict:
    return json.loads(Path(path).read_text())
