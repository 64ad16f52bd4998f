"""Stage functions behind the CLI: each reads files and writes files or returns results."""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chain import build_chain, run_global
from .config import RunConfig
from .dytag import DyTAG, Split, load_dataset_dir, temporal_split
from .encoder import make_encoder
from .errors import ConfigError, MissingCacheError
from .history import FeatureBank, HistoryIndex, build_bank
from .llm import make_backend
from .model import DyGraspModel, ModelConfig, time_scale_for
from .recent import all_batches, extract_recent_features
from .store import FILE_NAMES, FeatureStore, fingerprint_for
from .synth import SynthTrace
from .templates import PromptTemplate
from .train import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    g: DyTAG
    trace: SynthTrace | None
    split: Split


def load_data(path: str | Path | None) -> Dataset:
    if path is None:
        raise ConfigError("no dataset given; set `data` in the config or pass --data")
    d = Path(path)
    if not (d / "edges.csv").exists():
        raise ConfigError(f"{d} is not a dataset directory (edges.csv missing)")
    g = load_dataset_dir(d)
    trace = SynthTrace.load(d / "trace.json") if (d / "trace.json").exists() else None
    return Dataset(g, trace, temporal_split(g))


def load_template(spec: str) -> PromptTemplate:
    p = Path(spec)
    if p.suffix == ".txt" or p.exists():
        if not p.exists():
            raise ConfigError(f"template file {p} not found")
        return PromptTemplate.load(p)
    try:
        return PromptTemplate.builtin(spec)
    except (FileNotFoundError, ValueError, KeyError):
        raise ConfigError(f"no template file or builtin named {spec!r}") from None


def backend_for(cfg: RunConfig, data: Dataset, transport=None):
    bcfg = cfg.backend_config()
    if bcfg.kind == "oracle" and data.trace is None:
        raise ConfigError("the oracle backend needs trace.json in the dataset directory (made by `dygrasp synth`)")
    try:
        return make_backend(bcfg, trace=data.trace, transport=transport)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def encoder_for(cfg: RunConfig, transport=None):
    try:
        return make_encoder(cfg.encoder_config(), transport=transport)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def recent_fingerprint(backend, template: PromptTemplate, c: int) -> dict:
    return fingerprint_for(backend.fingerprint(), template.digest, c=c)


def description_fingerprint(backend, template: PromptTemplate, s: int, segmenting: str) -> dict:
    return fingerprint_for(backend.fingerprint(), template.digest, s=s, segmenting=segmenting)


def global_fingerprint(backend, template: PromptTemplate, encoder, s: int, segmenting: str) -> dict:
    fp = description_fingerprint(backend, template, s, segmenting)
    fp.update(encoder.fingerprint())
    return fp


def _stage_store(cache_dir: Path, kind: str, dim, fp: dict, resume: bool, force: bool) -> FeatureStore:
    name = FILE_NAMES[kind]
    paths = [cache_dir / f"{name}.bin", cache_dir / f"{name}.idx.json"]
    if paths[0].exists():
        if force:
            for p in paths:
                p.unlink(missing_ok=True)
        elif not resume:
            store = FeatureStore(cache_dir, kind, dim, fp)
            if store.durable_count:
                raise ConfigError(f"{paths[0]} already holds {store.durable_count} entries; "
                                  "pass --resume to continue it or --force to rebuild")
            return store
    return FeatureStore(cache_dir, kind, dim, fp)


def reason_recent(cfg: RunConfig, data: Dataset, cache_dir: str | Path, backend, resume: bool = False,
                  force: bool = False) -> dict:
    template = load_template(cfg.recent_template)
    cache_dir = Path(cache_dir)
    store = _stage_store(cache_dir, "recent", backend.d_llm, recent_fingerprint(backend, template, cfg.c),
                         resume, force)
    before = store.durable_count
    batches = all_batches(data.g, cfg.c)
    retries = cfg.backend_config().retries
    extract_recent_features(batches, backend, data.g, template, store, workers=cfg.workers, retries=retries)
    store.compact()
    return {"stage": "recent", "batches": len(batches), "features": store.durable_count,
            "reused": before, "cache": str(store.bin_path)}


def reason_global(cfg: RunConfig, data: Dataset, cache_dir: str | Path, backend, encoder,
                  resume: bool = False, force: bool = False) -> dict:
    template = load_template(cfg.global_template)
    cache_dir = Path(cache_dir)
    desc = _stage_store(cache_dir, "descriptions", None,
                        description_fingerprint(backend, template, cfg.s, cfg.segmenting), resume, force)
    vecs = _stage_store(cache_dir, "global", encoder.dim,
                        global_fingerprint(backend, template, encoder, cfg.s, cfg.segmenting), resume, force)
    before = desc.durable_count
    retries = cfg.backend_config().retries
    chains = run_global(data.g, cfg.s, template, backend, encoder, desc, vecs, mode=cfg.segmenting,
                        workers=cfg.workers, retries=retries)
    desc.compact()
    vecs.compact()
    return {"stage": "global", "nodes": len(chains), "descriptions": desc.durable_count,
            "reused": before, "cache": str(vecs.bin_path)}


def chain_boundaries(g: DyTAG, s: int, segmenting: str) -> dict[int, list[float]]:
    return {v: build_chain(g, v, s, segmenting).boundaries for v in g.nodes}


def _open_readonly(cache_dir: Path, kind: str, dim, fp: dict, stage: str) -> FeatureStore:
    try:
        return FeatureStore(cache_dir, kind, dim, fp, readonly=True)
    except MissingCacheError:
        raise MissingCacheError(f"no {kind} cache in {cache_dir}; run `dygrasp reason {stage}` first") from None


def open_bank(cfg: RunConfig, data: Dataset, cache_dir: str | Path | None, backend, encoder,
              use_recent: bool, use_global: bool, index: HistoryIndex | None = None) -> FeatureBank:
    """Load the cached features a model needs, refusing partial or mismatched caches."""
    if (use_recent or use_global) and cache_dir is None:
        raise ConfigError("no cache directory; set `cache_dir` or pass --caches")
    cache_dir = Path(cache_dir) if cache_dir is not None else None
    recent = vecs = chains = None
    if use_recent:
        template = load_template(cfg.recent_template)
        recent = _open_readonly(cache_dir, "recent", backend.d_llm,
                                recent_fingerprint(backend, template, cfg.c), "recent")
    if use_global:
        template = load_template(cfg.global_template)
        vecs = _open_readonly(cache_dir, "global", encoder.dim,
                              global_fingerprint(backend, template, encoder, cfg.s, cfg.segmenting), "global")
        chains = chain_boundaries(data.g, cfg.s, cfg.segmenting)
    bank = build_bank(data.g, encoder, recent, vecs, chains, index)
    if bank.recent_present is not None and not bank.recent_present.all():
        bank.check_recent(np.arange(bank.index.num_slots), np.ones(bank.index.num_slots, dtype=bool))
    return bank


def resolve_model_config(cfg: RunConfig, data: Dataset, **overrides) -> ModelConfig:
    if "time_scale" not in cfg.model:
        overrides.setdefault("time_scale", time_scale_for(data.g.timestamps[list(data.split.train)]))
    return cfg.model_config(**overrides)


def fit(data: Dataset, bank: FeatureBank, model_cfg: ModelConfig, train_cfg: TrainConfig,
        on_epoch=None) -> tuple[DyGraspModel, TrainResult]:
    model = DyGraspModel(model_cfg, seed=train_cfg.seed).attach(bank, until=data.split.boundary_times[0])
    result = train(model, data.g, data.split, train_cfg, on_epoch=on_epoch)
    return model, result


def reset_dir(path: Path) -> None:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
