"""Command-line frontend: defret {synth,ingest,fitgap,train,retrieve,evaluate,deform}.

Exit status is 0 on success, 1 on an internal error and 2 on a usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import distance_field as udf
from .deform import DeformationProblem, SolverOptions, deform
from .embed import CheckpointError, load_checkpoint
from .fitgap import GapConfig, load_table, precompute, sample_pairs, save_table
from .geometry import MeshError, N_EVAL_POINTS, N_TRAIN_POINTS, load_mesh, make_record, normalize, write_obj
from .reteval import GapStore, build_index, cd_ranker, evaluate, model_ranker, retrieve
from .store import config_hash, derive_seed, ingest, load_store, read_manifest, store_digest
from .synthetic import FamilyParams, generate_synthetic
from .train import STRATEGIES, PROB_MODES, TrainConfig, train

log = logging.getLogger("defret")

PROTOCOL_COLUMNS = {
    "table1": ("top1_dm", "top3_dm", "top1_em", "top3_em"),
    "rank": ("rank",),
    "recall": ("recall1",),
}
PROTOCOL_COLUMNS["all"] = PROTOCOL_COLUMNS["table1"] + ("rank", "recall1")


class UsageError(Exception):
    """Bad arguments, configuration or inputs; maps to exit status 2."""


def cache_dir(default: Path) -> Path:
    return Path(os.environ.get("DEFRET_CACHE_DIR") or default)


def load_run_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {p} is not valid JSON: {exc}") from exc
    unknown = set(cfg) - {"train", "solver", "resolution", "n_train", "n_eval", "category"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def solver_options(cfg: dict) -> SolverOptions:
    opts = dict(cfg.get("solver", {}))
    names = {f.name for f in fields(SolverOptions)}
    if set(opts) - names:
        raise UsageError(f"unknown solver options: {sorted(set(opts) - names)}")
    so = SolverOptions(**opts)
    try:
        so.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return so


def gap_config(args, cfg: dict) -> GapConfig:
    res = args.resolution or cfg.get("resolution", udf.DEFAULT_RESOLUTION)
    if res < 2:
        raise UsageError("resolution must be at least 2")
    return GapConfig(resolution=res, solver=solver_options(cfg))


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_db(store, split):
    shapes = load_store(_require(store, "shape store"), split=split)
    if not shapes:
        raise UsageError(f"store {store} has no shapes in split {split!r}")
    return shapes


# commands

def cmd_synth(args, cfg) -> int:
    out = Path(args.out)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    fp = FamilyParams(family=args.family, n_train=16, n_eval=16)
    if args.family == "comb":
        fp.structures = ("teeth",)
    elif args.family == "box":
        fp.structures = ("box",)
    try:
        shapes = generate_synthetic(fp, args.count, derive_seed(args.seed, "synth"))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not 0 <= args.n_query < args.count:
        raise UsageError("--n-query must be smaller than --count")
    manifest = []
    for i, s in enumerate(shapes):
        path = out / "meshes" / f"{s.name}.obj"
        write_obj(path, s.mesh)
        split = "query" if i >= args.count - args.n_query else "train"
        manifest.append({"id": s.id, "path": f"meshes/{path.name}", "split": split})
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {len(shapes)} meshes and {out / 'manifest.json'}")
    return 0


def cmd_ingest(args, cfg) -> int:
    try:
        manifest = read_manifest(_require(args.manifest, "manifest"))
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(str(exc)) from exc
    n_train = cfg.get("n_train", N_TRAIN_POINTS)
    n_eval = cfg.get("n_eval", N_EVAL_POINTS)
    chash = config_hash({"stage": "ingest", "seed": args.seed, "n_train": n_train, "n_eval": n_eval})
    rep = ingest(manifest, args.store, args.seed, n_train, n_eval, chash)
    for err in rep.errors:
        print(f"error: shape {err['id']} ({err['path']}): {err['error']}", file=sys.stderr)
    print(f"ingested {len(rep.added)}, unchanged {len(rep.unchanged)}, failed {len(rep.errors)}")
    return 0


def cmd_fitgap(args, cfg) -> int:
    db = _load_db(args.store, args.split)
    gcfg = gap_config(args, cfg)
    seed = derive_seed(args.seed, "fitgap")
    chash = config_hash({"stage": "fitgap", "seed": args.seed, "store": store_digest(args.store),
                         "resolution": gcfg.resolution, "solver": asdict(gcfg.solver), "split": args.split})
    out = Path(args.out)
    log_path = out.with_name(out.name + ".log")
    meta_path = out.with_name(out.name + ".json")
    if log_path.exists():
        if not args.resume:
            log_path.unlink()
        elif meta_path.exists() and json.loads(meta_path.read_text()).get("config_hash") not in (None, chash):
            raise UsageError("--resume with a different configuration than the interrupted run")
    _write_json(meta_path, {"config_hash": chash, "seed": args.seed, "complete": False})
    sampling = sample_pairs(db, seed)
    table, rep = precompute(db, sampling, gcfg, log_path=log_path, workers=args.workers, limit=args.limit,
                            progress=lambda i, n: log.info("pair %d/%d", i, n))
    for err in rep.failures:
        print(f"error: {err}", file=sys.stderr)
    save_table(out, table)
    complete = args.limit is None and not rep.failures
    _write_json(meta_path, {"config_hash": chash, "seed": args.seed, "complete": complete, "entries": len(table),
                            "failures": rep.failures})
    if complete:
        log_path.unlink(missing_ok=True)
    print(f"{len(table)} entries ({rep.computed} computed, {rep.skipped} cached, {len(rep.failures)} failed)")
    return 0


def train_config(args, cfg) -> TrainConfig:
    try:
        tc = TrainConfig.from_dict(cfg.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if args.epochs is not None:
        tc.epochs = args.epochs
    if args.prob_mode is not None:
        tc.prob_mode = args.prob_mode
    tc.seed = derive_seed(args.seed, "train")
    try:
        tc.validate()
    except ValueError as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    return tc


def cmd_train(args, cfg) -> int:
    tc = train_config(args, cfg)
    db = _load_db(args.store, args.split)
    table = load_table(_require(args.table, "fitgap table"))
    sdig = store_digest(args.store)
    chash = config_hash({"stage": "train", "seed": args.seed, "store": sdig, "strategy": args.strategy,
                         "train": tc.to_dict()})
    out = Path(args.out)
    res = train(db, table, tc, args.strategy, log_csv=out.with_name(out.name + ".loss.csv"), checkpoint=out,
                meta={"config_hash": chash, "root_seed": args.seed, "store_digest": sdig, "split": args.split})
    print(f"trained {tc.epochs} epochs, loss {res.history[0].loss:.6g} -> {res.history[-1].loss:.6g}; "
          f"{len(res.skipped)} queries skipped")
    return 0


def _checkpoint(args):
    try:
        model, meta = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    except CheckpointError as exc:
        raise UsageError(f"incompatible checkpoint: {exc}") from exc
    sdig = store_digest(args.store)
    if meta.get("store_digest") not in (None, sdig):
        raise UsageError("incompatible checkpoint: trained on a different shape store")
    return model, meta


def cmd_retrieve(args, cfg) -> int:
    qpath = _require(args.query, "query mesh")
    model, meta = _checkpoint(args)
    db = _load_db(args.store, args.split)
    try:
        qmesh = normalize(load_mesh(qpath))
    except MeshError as exc:
        raise UsageError(f"cannot read query {qpath}: {exc}") from exc
    qseed = derive_seed(args.seed, "query")
    query = make_record(-1, qmesh, qseed, qpath.stem, N_TRAIN_POINTS, 0)
    index = build_index(db, model)
    ranked = retrieve(query, index, model, args.n)
    names = {s.id: s.name for s in db}
    out = {"config_hash": meta.get("config_hash"), "seed": args.seed, "query": str(qpath),
           "results": [{"id": i, "name": names[i], "delta": d} for i, d in ranked]}
    if args.deform:
        odir = Path(args.out or ".")
        odir.mkdir(parents=True, exist_ok=True)
        gcfg = gap_config(args, cfg)
        grid = udf.build_udf(query, gcfg.resolution)
        by_id = {s.id: s for s in db}
        for item in out["results"]:
            res = deform(DeformationProblem(by_id[item["id"]].mesh, grid, gcfg.lam), gcfg.solver)
            path = odir / f"deformed_{item['id']}.obj"
            res.export(path)
            item["deformed"] = str(path)
            item.update(res.summary())
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0


def cmd_evaluate(args, cfg) -> int:
    model, meta = _checkpoint(args)
    db = _load_db(args.store, args.split)
    queries = load_store(args.store, split=args.query_split)
    if not queries:
        raise UsageError(f"store has no shapes in split {args.query_split!r}")
    table = load_table(_require(args.table, "fitgap table"))
    gcfg = gap_config(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(args.seed, "evaluate")
    chash = config_hash({"stage": "evaluate", "seed": args.seed, "checkpoint": meta.get("weights"),
                         "store": store_digest(args.store), "n": args.n, "resolution": gcfg.resolution,
                         "solver": asdict(gcfg.solver)})
    cache = cache_dir(out / "cache")
    cache.mkdir(parents=True, exist_ok=True)
    by_id = {s.id: s for s in db + queries}
    store = GapStore(by_id, gcfg, log_path=cache / f"gaps_{config_hash({'s': store_digest(args.store), 'r': gcfg.resolution, 'o': asdict(gcfg.solver)})}.dfgt")
    rankers = {"ours": model_ranker(model, build_index(db, model)), "ranked_cd": cd_ranker(db)}
    reports = evaluate(queries, db, rankers, store, n_rank=args.n, seed=seed, config_hash=chash, pool_table=table)
    cols = PROTOCOL_COLUMNS[args.protocol]
    summary = {"config_hash": chash, "seed": args.seed, "protocol": args.protocol, "paper_scale": args.paper_scale,
               "methods": {}}
    for name, rep in reports.items():
        rep.write_csv(out / f"{name}.csv", paper_scale=args.paper_scale, columns=cols)
        s = rep.summary(args.paper_scale)
        summary["methods"][name] = {c: s["means"][c] for c in cols}
    _write_json(out / "metrics.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_deform(args, cfg) -> int:
    try:
        src = normalize(load_mesh(_require(args.source, "source mesh")))
        tgt = normalize(load_mesh(_require(args.target, "target mesh")))
    except MeshError as exc:
        raise UsageError(str(exc)) from exc
    gcfg = gap_config(args, cfg)
    res = deform(DeformationProblem(src, udf.build_udf(tgt, gcfg.resolution), gcfg.lam), gcfg.solver)
    side = res.export(args.out)
    print(f"wrote {args.out} and {side}: fit {res.fit_term:.6g}, rigidity {res.rigidity_term:.6g}, "
          f"{res.iterations} iterations")
    return 0


# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    common.add_argument("--workers", type=int, default=1, help="parallel workers; 1 is bit-deterministic")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="defret", description="Deformation-aware shape retrieval.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a procedural shape family and its manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--family", choices=("table", "comb", "box"), default="table")
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--n-query", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="normalize meshes and sample clouds into a store")
    s.add_argument("--manifest", required=True)
    s.add_argument("--store", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fitgap", parents=[common], help="precompute fitting gaps for sampled pairs")
    s.add_argument("--store", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--resolution", type=int)
    s.add_argument("--resume", action="store_true", help="continue an interrupted run")
    s.add_argument("--limit", type=int, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_fitgap)

    s = sub.add_parser("train", parents=[common], help="train the embedding")
    s.add_argument("--store", required=True)
    s.add_argument("--table", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--strategy", choices=STRATEGIES, default="regression")
    s.add_argument("--prob-mode", choices=PROB_MODES)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("retrieve", parents=[common], help="rank database shapes for a query mesh")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("-n", type=int, default=5)
    s.add_argument("--split", default="train")
    s.add_argument("--deform", action="store_true", help="also deform each result toward the query")
    s.add_argument("--out", help="directory for deformed meshes")
    s.add_argument("--resolution", type=int)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("evaluate", parents=[common], help="retrieval metrics against the Ranked-CD baseline")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--table", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--protocol", choices=tuple(PROTOCOL_COLUMNS), default="all")
    s.add_argument("--n", type=int, default=150, help="candidate pool size for rank and recall")
    s.add_argument("--split", default="train")
    s.add_argument("--query-split", default="query")
    s.add_argument("--resolution", type=int)
    s.add_argument("--paper-scale", action="store_true", help="report distances in units of 1e-2")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("deform", parents=[common], help="deform one mesh toward another")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resolution", type=int)
    s.set_defaults(func=cmd_deform)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = load_run_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"defret: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"defret: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
