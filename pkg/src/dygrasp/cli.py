"""Command-line entry point: `dygrasp <stage> ...`.

Exit codes: 0 ok, 1 unexpected failure, 2 usage, 3 config or data error,
4 stale cache, 5 missing cache, 6 backend failure, 7 extraction aborted,
8 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .dytag import inductive_mask, write_dytag
from .errors import ConfigError, DyGraspError
from .model import DyGraspModel
from .pipeline import (
    backend_for, encoder_for, fit, load_data, load_template, open_bank, reason_global, reason_recent,
    resolve_model_config,
)
from .recent import token_report
from .synth import count_unresolved, generate, write_synthetic
from .train import VARIANTS, EvalConfig, ablate, eval_linkpred, eval_retrieval, query_ids, summarize

log = logging.getLogger("dygrasp")


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        out = {"ts": round(record.created, 3), "level": record.levelname.lower(), "logger": record.name,
               "msg": record.getMessage()}
        extra = getattr(record, "fields", None)
        if extra:
            out.update(extra)
        return json.dumps(out, default=str)


def setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- artifacts --------------------------------------------------------------

def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_run_json(out_dir: Path, args: argparse.Namespace, cfg: RunConfig | None, seeds) -> None:
    record = {
        "command": args.command + (f" {args.stage}" if getattr(args, "stage", None) else ""),
        "argv": list(getattr(args, "argv", sys.argv[1:])),
        "config": cfg.to_dict() if cfg is not None else None,
        "seeds": list(seeds),
        "versions": {"dygrasp": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
    }
    write_json(out_dir / "run.json", record)


def write_history_csv(path: Path, rows: list[dict], extra_cols: tuple[str, ...] = ()) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(extra_cols) + ["epoch", "loss", "val_AP"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in cols})


def metric_table(per_seed: dict[str, list[float]]) -> dict:
    return {k: summarize(v) for k, v in per_seed.items()}


# -- config resolution ------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    changes = {}
    for flag, name in (("data", "data"), ("caches", "cache_dir"), ("window", "c"), ("segments", "s"),
                       ("segmenting", "segmenting"), ("workers", "workers"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[name] = value
    template = getattr(args, "template", None)
    if template is not None:
        changes["global_template" if getattr(args, "stage", None) == "global" else "recent_template"] = template
    backend = dict(cfg.backend)
    for flag, key in (("backend", "kind"), ("endpoint", "endpoint")):
        value = getattr(args, flag, None)
        if value is not None:
            backend[key] = value
    changes["backend"] = backend
    if getattr(args, "seeds", None) is not None:
        changes["seeds"] = args.seeds
    return RunConfig.from_dict({**cfg.to_dict(), **changes})


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_candidates(text: str):
    if text == "all":
        return "all"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--candidates takes an integer or 'all', got {text!r}") from None


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> dict:
    cfg = RunConfig.load(args.config)
    scfg = cfg.synth_config()
    if args.seed is not None:
        scfg = replace(scfg, seed=args.seed)
    g, trace = generate(scfg)
    out = Path(args.out)
    write_synthetic(g, trace, out)
    write_run_json(out, args, cfg, [scfg.seed])
    return {"nodes": len(g.nodes), "interactions": len(g.log), "out": str(out)}


def cmd_ingest(args) -> dict:
    cfg = resolve_config(args)
    data = load_data(cfg.data)
    g, split = data.g, data.split
    summary = {
        "nodes": len(g.nodes), "interactions": len(g.log), "bipartite": bool(g.is_bipartite),
        "time_range": [float(g.timestamps.min()), float(g.timestamps.max())],
        "split": {"train": len(split.train), "val": len(split.val), "test": len(split.test)},
        "inductive_test": len(inductive_mask(g, split)),
    }
    if args.out:
        out = Path(args.out)
        write_dytag(g, out)
        write_run_json(out, args, cfg, [cfg.seed])
    return summary


def cmd_reason(args) -> dict:
    cfg = resolve_config(args)
    data = load_data(cfg.data)
    out = Path(args.out or cfg.cache_dir or "")
    if not str(out):
        raise ConfigError("no cache directory; pass --out")
    backend = backend_for(cfg, data)
    t0 = time.time()
    if args.stage == "recent":
        report = reason_recent(cfg, data, out, backend, resume=args.resume, force=args.force)
    else:
        report = reason_global(cfg, data, out, backend, encoder_for(cfg), resume=args.resume, force=args.force)
    report["seconds"] = round(time.time() - t0, 3)
    write_run_json(out, args, cfg, [cfg.seed])
    return report


def cmd_tokens(args) -> dict:
    cfg = resolve_config(args)
    data = load_data(cfg.data)
    report = token_report(data.g, cfg.c, load_template(cfg.recent_template), mode=args.mode)
    if args.out:
        out = Path(args.out)
        write_json(out, report)
        write_run_json(out.parent, args, cfg, [])
    return report


def _model_flags(cfg: RunConfig) -> tuple[bool, bool]:
    m = cfg.model
    return bool(m.get("use_recent", True)), bool(m.get("use_global", True))


def cmd_train(args) -> dict:
    cfg = resolve_config(args)
    data = load_data(cfg.data)
    use_recent, use_global = _model_flags(cfg)
    backend = backend_for(cfg, data)
    encoder = encoder_for(cfg)
    bank = open_bank(cfg, data, cfg.cache_dir, backend, encoder, use_recent, use_global)
    model_cfg = resolve_model_config(cfg, data)
    train_cfg = cfg.train_config(seed=cfg.seed)
    out = Path(args.out)
    model, result = fit(data, bank, model_cfg, train_cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out, extra={"run": cfg.to_dict()})
    write_history_csv(out.parent / "history.csv", result.history)
    losses = [r["loss"] for r in result.history]
    metrics = metric_table({"best_val_AP": [result.best_val_ap if result.best_val_ap is not None else float("nan")],
                            "first_loss": [losses[0]], "last_loss": [losses[-1]]})
    write_json(out.parent / "train_metrics.json", metrics)
    write_run_json(out.parent, args, cfg, [cfg.seed])
    return {"checkpoint": str(out), "epochs": len(result.history), "best_epoch": result.best_epoch,
            "best_val_AP": result.best_val_ap, "first_loss": losses[0], "last_loss": losses[-1]}


def evaluate(model, data, task: str, ecfg: EvalConfig) -> dict[str, float]:
    if task == "retrieval":
        res = eval_retrieval(model, data.g, data.split, ecfg)
    else:
        ids = query_ids(data.g, data.split, ecfg)
        res = eval_linkpred(model, data.g, ids, seed=ecfg.seed)
    return res


def cmd_eval(args) -> dict:
    cfg = resolve_config(args)
    data = load_data(cfg.data)
    if not Path(args.ckpt).exists():
        raise ConfigError(f"checkpoint {args.ckpt} not found; run `dygrasp train` first")
    model, _ = DyGraspModel.load(args.ckpt)
    backend = backend_for(cfg, data)
    encoder = encoder_for(cfg)
    bank = open_bank(cfg, data, cfg.cache_dir, backend, encoder, model.cfg.use_recent, model.cfg.use_global)
    model.attach(bank)
    overrides = {"setting": args.setting}
    if args.k is not None:
        overrides["ks"] = tuple(args.k)
    if args.candidates is not None:
        overrides["num_candidates"] = args.candidates
    ecfg = cfg.eval_config(**overrides)
    res = evaluate(model, data, args.task, ecfg)
    n = res.pop("n")
    table = metric_table({k: [v] for k, v in res.items()})
    table["queries"] = n
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"metrics_{args.task}_{args.setting}.json"
    write_json(out, table)
    write_run_json(out.parent, args, cfg, [model.seed])
    return table


def cmd_ablate(args) -> dict:
    cfg = resolve_config(args)
    data = load_data(cfg.data)
    variants = args.variants or list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; have {list(VARIANTS)}")
    need_recent = any(VARIANTS[v]["use_recent"] for v in variants)
    need_global = any(VARIANTS[v]["use_global"] for v in variants)
    bank = open_bank(cfg, data, cfg.cache_dir, backend_for(cfg, data), encoder_for(cfg), need_recent, need_global)
    histories: list[dict] = []
    table = ablate(data.g, data.split, bank, resolve_model_config(cfg, data), cfg.train_config(), cfg.seeds,
                   variants, eval_seed=cfg.eval_config().seed, histories=histories)
    out = Path(args.out)
    write_json(out / "ablation.json", table)
    write_history_csv(out / "history.csv", histories, ("variant", "seed"))
    write_run_json(out, args, cfg, cfg.seeds)
    return table


def cmd_sweep(args) -> dict:
    cfg = resolve_config(args)
    data = load_data(cfg.data)
    backend = backend_for(cfg, data)
    encoder = encoder_for(cfg)
    out = Path(args.out)
    shared = out / "shared"
    # the stage the swept parameter does not touch is computed once
    if args.param == "c":
        reason_global(cfg, data, shared, backend, encoder, resume=True)
    else:
        reason_recent(cfg, data, shared, backend, resume=True)
    ecfg = cfg.eval_config()
    results, histories = {}, []
    for value in args.values:
        vcfg = replace(cfg, **{args.param: value})
        cache = out / f"{args.param}{value}"
        if args.param == "c":
            reason_recent(vcfg, data, cache, backend, resume=True)
        else:
            reason_global(vcfg, data, cache, backend, encoder, resume=True)
        bank = _sweep_bank(vcfg, data, backend, encoder, shared, cache, args.param)
        per_seed: dict[str, list[float]] = {}
        for seed in cfg.seeds:
            model, result = fit(data, bank, resolve_model_config(vcfg, data), vcfg.train_config(seed=seed))
            histories += [{"value": value, "seed": seed, **r} for r in result.history]
            res = eval_retrieval(model, data.g, data.split, ecfg)
            res.update(eval_linkpred(model, data.g, query_ids(data.g, data.split, ecfg), seed=ecfg.seed))
            res.pop("n")
            for k, v in res.items():
                per_seed.setdefault(k, []).append(v)
        entry = metric_table(per_seed)
        if data.trace is not None and args.param == "c" and backend.kind == "oracle":
            entry["unresolved"] = count_unresolved(data.g, data.trace, value)
        results[str(value)] = entry
    report = {"param": args.param, "values": args.values, "results": results}
    write_json(out / "sweep.json", report)
    write_history_csv(out / "history.csv", histories, ("value", "seed"))
    write_run_json(out, args, cfg, cfg.seeds)
    return report


def _sweep_bank(cfg, data, backend, encoder, shared: Path, cache: Path, param: str):
    use_recent, use_global = _model_flags(cfg)
    recent_dir, global_dir = (cache, shared) if param == "c" else (shared, cache)
    recent_bank = open_bank(cfg, data, recent_dir, backend, encoder, use_recent, False)
    global_bank = open_bank(cfg, data, global_dir, backend, encoder, False, use_global, index=recent_bank.index)
    recent_bank.bounds, recent_bank.chain = global_bank.bounds, global_bank.chain
    return recent_bank


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="dygrasp", description="LLM-derived temporal semantics for dynamic text-attributed graphs.")
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    p.add_argument("--version", action="version", version=f"dygrasp {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="run config JSON")
        if data:
            sp.add_argument("--data", help="dataset directory (edges.csv, node_text.csv, edge_text.csv)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a planted synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("ingest", help="validate a dataset and print its summary")
    common(sp)
    sp.add_argument("--out", help="write a normalized copy here")

    sp = sub.add_parser("reason", help="run LLM reasoning into a feature cache")
    sp.add_argument("stage", choices=["recent", "global"])
    common(sp)
    sp.add_argument("--out", help="cache directory")
    sp.add_argument("--window", type=int, help="sliding window length c (recent)")
    sp.add_argument("--segments", type=int, help="number of segments s (global)")
    sp.add_argument("--segmenting", choices=["count", "time"])
    sp.add_argument("--backend", choices=["mock", "oracle", "remote"])
    sp.add_argument("--endpoint")
    sp.add_argument("--template", help="template file or builtin name")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--resume", action="store_true", help="continue a partially written cache")
    sp.add_argument("--force", action="store_true", help="discard an existing cache and rebuild")

    sp = sub.add_parser("tokens", help="count recent-reasoning input tokens (no LLM calls)")
    common(sp)
    sp.add_argument("--mode", choices=["node-centric", "edge-centric"], default="node-centric")
    sp.add_argument("--window", type=int)
    sp.add_argument("--template")
    sp.add_argument("--out", help="also write the report here")

    sp = sub.add_parser("train", help="train a model on cached features")
    common(sp)
    sp.add_argument("--caches")
    sp.add_argument("--out", required=True, help="checkpoint path")

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--caches")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--task", choices=["retrieval", "linkpred"], default="retrieval")
    sp.add_argument("--setting", choices=["transductive", "inductive"], default="transductive")
    sp.add_argument("--k", type=parse_int_list)
    sp.add_argument("--candidates", type=parse_candidates, help="negatives per query: N or 'all'")
    sp.add_argument("--out", help="metrics JSON path")

    sp = sub.add_parser("ablate", help="train and test the four feature ablations")
    common(sp)
    sp.add_argument("--caches")
    sp.add_argument("--seeds", type=parse_int_list)
    sp.add_argument("--variants", type=lambda text: [v for v in text.split(",") if v],
                    help="comma-separated subset, e.g. --variants=full,-Recent&-Global")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("sweep", help="vary c or s, rerun reasoning, train and evaluate")
    common(sp)
    sp.add_argument("--param", choices=["c", "s"], required=True)
    sp.add_argument("--values", type=parse_int_list, required=True)
    sp.add_argument("--seeds", type=parse_int_list)
    sp.add_argument("--backend", choices=["mock", "oracle", "remote"])
    sp.add_argument("--endpoint")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out", required=True)
    return p


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "reason": cmd_reason, "tokens": cmd_tokens,
            "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "sweep": cmd_sweep}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"level": "error", "error": kind, "exit_code": code,
                                 "msg": " ".join(str(message).split())}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(2, "usage", exc)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    setup_logging(args.log_level)
    try:
        result = COMMANDS[args.command](args)
    except DyGraspError as exc:
        return _fail(exc.exit_code, type(exc).__name__, exc)
    except KeyboardInterrupt:
        return _fail(130, "interrupted", "interrupted; rerun with --resume to continue")
    except Exception as exc:   # last resort: still one parsable line
        log.debug("unhandled", exc_info=True)
        return _fail(1, type(exc).__name__, exc)
    sys.stdout.write(json.dumps(result, sort_keys=True, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
