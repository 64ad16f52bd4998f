"""Training with sampled negatives, link prediction / retrieval evaluation, ablations."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .dytag import DyTAG, Split, inductive_mask
from .errors import ConfigError, TrainingDiverged
from .metrics import average_precision, hits_at_k, ranks_pessimistic, roc_auc
from .model import DyGraspModel, ModelConfig

log = logging.getLogger(__name__)

VARIANTS = {
    "full": dict(use_recent=True, use_global=True),
    "-Recent": dict(use_recent=False, use_global=True),
    "-Global": dict(use_recent=True, use_global=False),
    "-Recent&-Global": dict(use_recent=False, use_global=False),
}


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-4
    max_epochs: int = 50
    eval_every: int = 5
    early_stop_patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_val_queries: int | None = None

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "max_epochs", "eval_every", "early_stop_patience", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train config: {name} must be positive")


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = (1, 3, 10)
    num_candidates: int | str = 100
    setting: str = "transductive"
    seed: int = 0
    max_queries: int | None = None
    chunk: int = 16

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        if list(self.ks) != sorted(self.ks) or not self.ks or self.ks[0] < 1:
            raise ConfigError("eval config: ks must be positive and ascending")
        if self.num_candidates != "all" and (not isinstance(self.num_candidates, int) or self.num_candidates < max(self.ks)):
            raise ConfigError("eval config: num_candidates must be 'all' or an integer >= max(ks)")
        if self.setting not in ("transductive", "inductive"):
            raise ConfigError(f"eval config: unknown setting {self.setting!r}")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_ap: float | None = None


class NegativeSampler:
    """Uniform over the destination partition (bipartite) or all nodes, never the true node."""

    def __init__(self, g: DyTAG, model: DyGraspModel):
        idx = model.bank.index
        pool_ids = g.destinations if g.is_bipartite else idx.nodes
        self.pool = np.sort(idx.index_of(pool_ids))

    def sample(self, true_idx: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        pool = self.pool
        true_idx = np.asarray(true_idx)
        in_pool = np.isin(true_idx, pool)
        if len(pool) - 1 < 1 and in_pool.any():
            raise ValueError("negative pool has no node besides the true destination")
        out = np.empty(len(true_idx), dtype=np.int64)
        # draw from pool minus the true node: skip over its position
        k_excl = np.where(in_pool, rng.integers(0, max(len(pool) - 1, 1), size=len(true_idx)), 0)
        pos = np.searchsorted(pool, true_idx)
        shifted = np.where(k_excl >= pos, k_excl + 1, k_excl)
        out[in_pool] = pool[shifted[in_pool]]
        if (~in_pool).any():
            out[~in_pool] = pool[rng.integers(0, len(pool), size=int((~in_pool).sum()))]
        return out

    def sample_many(self, true_idx: int, n: int, rng: np.random.Generator) -> np.ndarray:
        others = self.pool[self.pool != true_idx]
        if n == "all" or n >= len(others):
            return others.copy()
        return rng.choice(others, size=n, replace=False)


def _edges(g: DyTAG, ids, model: DyGraspModel):
    ids = np.asarray(list(ids), dtype=np.int64)
    idx = model.bank.index
    src = idx.index_of([g.log[i].src for i in ids]) if len(ids) else np.zeros(0, dtype=np.int64)
    dst = idx.index_of([g.log[i].dst for i in ids]) if len(ids) else np.zeros(0, dtype=np.int64)
    t = g.timestamps[ids] if len(ids) else np.zeros(0)
    return src, dst, t


def _logits(model: DyGraspModel, src, dst, neg, t):
    reps = model.represent_indexed(np.concatenate([src, dst, neg]), np.concatenate([t, t, t]))
    B = len(src)
    m_u, m_v, m_n = reps[:B], reps[B : 2 * B], reps[2 * B :]
    return model.score_logits(m_u, m_v), model.score_logits(m_u, m_n)


def link_scores(model: DyGraspModel, g: DyTAG, ids, seed: int, batch_size: int = 256):
    """Positive and 1:1 sampled-negative probabilities for the given interactions."""
    src, dst, t = _edges(g, ids, model)
    neg = NegativeSampler(g, model).sample(dst, np.random.default_rng(seed))
    pos_out, neg_out = [], []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for a in range(0, len(src), batch_size):
            sl = slice(a, a + batch_size)
            lp, ln = _logits(model, src[sl], dst[sl], neg[sl], t[sl])
            pos_out.append(torch.sigmoid(lp).double().numpy())
            neg_out.append(torch.sigmoid(ln).double().numpy())
    model.train(was_training)
    return np.concatenate(pos_out), np.concatenate(neg_out)


def eval_linkpred(model: DyGraspModel, g: DyTAG, ids, seed: int = 0, batch_size: int = 256,
                  max_queries: int | None = None) -> dict:
    ids = list(ids)
    if max_queries is not None and len(ids) > max_queries:
        ids = sorted(np.random.default_rng(seed + 1).choice(ids, size=max_queries, replace=False).tolist())
    if not ids:
        raise ValueError("no interactions to evaluate")
    pos, neg = link_scores(model, g, ids, seed, batch_size)
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos), bool), np.zeros(len(neg), bool)])
    return {"AP": average_precision(scores, labels), "AUC": roc_auc(scores, labels), "n": len(ids)}


def query_ids(g: DyTAG, split: Split, cfg: EvalConfig) -> list[int]:
    ids = list(split.test)
    if cfg.setting == "inductive":
        mask = inductive_mask(g, split)
        if not mask:
            raise ValueError("no inductive test instances")
        ids = [i for i in ids if i in mask]
    if cfg.max_queries is not None and len(ids) > cfg.max_queries:
        ids = sorted(np.random.default_rng(cfg.seed + 2).choice(ids, size=cfg.max_queries, replace=False).tolist())
    return ids


def eval_retrieval(model: DyGraspModel, g: DyTAG, split: Split, cfg: EvalConfig, ids=None) -> dict:
    """Hit@k of the true destination against sampled negatives, pessimistic ties."""
    ids = query_ids(g, split, cfg) if ids is None else list(ids)
    src, dst, t = _edges(g, ids, model)
    sampler = NegativeSampler(g, model)
    rng = np.random.default_rng(cfg.seed)
    cands = [sampler.sample_many(int(v), cfg.num_candidates, rng) for v in dst]
    ranks = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for a in range(0, len(ids), cfg.chunk):
            sl = range(a, min(a + cfg.chunk, len(ids)))
            nodes = np.concatenate([src[list(sl)], dst[list(sl)]] + [cands[q] for q in sl])
            times = np.concatenate([t[list(sl)], t[list(sl)]] + [np.full(len(cands[q]), t[q]) for q in sl])
            reps = model.represent_indexed(nodes, times)
            n = len(sl)
            m_u, m_v = reps[:n], reps[n : 2 * n]
            true_s = model.score_logits(m_u, m_v).double().numpy()
            off = 2 * n
            for j, q in enumerate(sl):
                k = len(cands[q])
                cs = model.score_logits(m_u[j].expand(k, -1), reps[off : off + k]).double().numpy()
                off += k
                ranks.append(int(ranks_pessimistic(true_s[j : j + 1], cs[None, :])[0]))
    model.train(was_training)
    out = {f"Hit@{k}": v for k, v in hits_at_k(ranks, cfg.ks).items()}
    out["n"] = len(ids)
    return out


def train(model: DyGraspModel, g: DyTAG, split: Split, cfg: TrainConfig, on_epoch=None) -> TrainResult:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    sampler = NegativeSampler(g, model)
    src, dst, t = _edges(g, split.train, model)
    if len(src) == 0:
        raise ValueError("empty training range")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    result = TrainResult()
    best_state = None
    bad_validations = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        neg = sampler.sample(dst, rng)
        total, count = 0.0, 0
        for b, a in enumerate(range(0, len(src), cfg.batch_size)):
            sl = slice(a, a + cfg.batch_size)
            lp, ln = _logits(model, src[sl], dst[sl], neg[sl], t[sl])
            logits = torch.cat([lp, ln])
            labels = torch.cat([torch.ones_like(lp), torch.zeros_like(ln)])
            loss = F.binary_cross_entropy_with_logits(logits, labels)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {b}; last mean loss "
                    f"{total / max(count, 1):.4f}; try a lower learning rate")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(logits)
            count += len(logits)
        row = {"epoch": epoch, "loss": total / count, "val_AP": None}
        if epoch % cfg.eval_every == 0 or epoch == cfg.max_epochs:
            if len(split.val):
                ap = eval_linkpred(model, g, split.val, seed=cfg.seed + 7, batch_size=cfg.batch_size,
                                   max_queries=cfg.max_val_queries)["AP"]
                row["val_AP"] = ap
                if result.best_val_ap is None or ap > result.best_val_ap:
                    result.best_val_ap, result.best_epoch = ap, epoch
                    best_state = copy.deepcopy(model.state_dict())
                    bad_validations = 0
                else:
                    bad_validations += 1
        result.history.append(row)
        log.info("epoch %d loss %.5f val_AP %s", epoch, row["loss"], row["val_AP"])
        if on_epoch is not None:
            on_epoch(row)
        if bad_validations >= cfg.early_stop_patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}")
    return replace(base, **VARIANTS[name])


def summarize(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "per_seed": [float(x) for x in arr]}


def ablate(g: DyTAG, split: Split, bank, model_cfg: ModelConfig, train_cfg: TrainConfig, seeds,
           variants=tuple(VARIANTS), eval_ids=None, eval_seed: int = 0, histories: list | None = None) -> dict:
    """Train and test each variant with identical seeds and data order; AP/AUC per variant.

    Per-epoch rows, tagged with variant and seed, are appended to ``histories`` when given.
    """
    table = {}
    for name in variants:
        aps, aucs = [], []
        for seed in seeds:
            cfg = variant_config(model_cfg, name)
            model = DyGraspModel(cfg, seed=seed).attach(bank, until=split.boundary_times[0])
            result = train(model, g, split, replace(train_cfg, seed=seed))
            if histories is not None:
                histories.extend({"variant": name, "seed": seed, **row} for row in result.history)
            res = eval_linkpred(model, g, eval_ids if eval_ids is not None else split.test, seed=eval_seed)
            aps.append(res["AP"])
            aucs.append(res["AUC"])
            log.info("variant %s seed %d AP %.4f AUC %.4f", name, seed, res["AP"], res["AUC"])
        table[name] = {"AP": summarize(aps), "AUC": summarize(aucs)}
    return table

