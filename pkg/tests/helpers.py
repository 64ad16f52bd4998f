"""Shared builders: feature banks from the mock pipeline, small model configs, leakage probes."""

import numpy as np
import torch

from dygrasp.chain import run_global
from dygrasp.dytag import DyTAG
from dygrasp.encoder import MockEncoder
from dygrasp.history import build_bank
from dygrasp.llm import MockBackend
from dygrasp.model import DyGraspModel, ModelConfig
from dygrasp.recent import all_batches, extract_recent_features
from dygrasp.synth import OracleBackend
from dygrasp.templates import PromptTemplate

RECENT = PromptTemplate.builtin("synthetic_recent")
GLOBAL = PromptTemplate.builtin("synthetic_global")


class MemoryVectors:
    """In-memory stand-in with the FeatureStore read surface."""

    def __init__(self, dim):
        self.dim = dim
        self.data = {}

    def put(self, key, value):
        self.data[tuple(key)] = np.asarray(value, dtype=np.float32)

    def has(self, key):
        return tuple(key) in self.data

    def get(self, key):
        return self.data[tuple(key)]

    def flush(self):
        pass


def mock_bank(g: DyTAG, c=4, s=3, d_llm=16, d_bert=16, backend=None, encoder=None, index=None):
    backend = backend or MockBackend(d_llm)
    encoder = encoder or MockEncoder(d_bert)
    recent = MemoryVectors(d_llm)
    for f in extract_recent_features(all_batches(g, c), backend, g, RECENT):
        recent.put((f.node, f.interaction), f.vector)
    vecs = MemoryVectors(d_bert)
    chains = run_global(g, s, GLOBAL, backend, encoder, None, vecs)
    return build_bank(g, encoder, recent, vecs, {v: ch.boundaries for v, ch in chains.items()}, index)


def small_config(**kw) -> ModelConfig:
    base = dict(L=2, d_t=4, d_SF=8, heads=2, dropout=0.0, n_neighbors=3, n_recent=4, d_llm=16, d_bert=16,
                time_scale=5.0)
    base.update(kw)
    return ModelConfig(**base)


def perturb_from(g: DyTAG, t: float, rng) -> DyTAG:
    """Rewrite the edge text of every interaction at or after t and push those events later.

    Endpoints are kept so per-node event counts (and with them the count-based
    segment partition of earlier periods) stay fixed.
    """
    shift = float(rng.integers(1, 50))
    texts = dict(g.edge_texts)
    rows = []
    for it in g.log:
        ref, ts = it.edge_text_ref, it.timestamp
        if ts >= t:
            ref = 1_000_000 + it.id
            texts[ref] = f"rewritten {int(rng.integers(10**6))} {['book', 'kit', 'bag'][it.id % 3]}"
            ts = ts + shift
        rows.append((it.src, it.dst, ref, ts))
    return DyTAG.from_records(g.node_texts, texts, rows)


def leakage_probe(seed: int) -> bool:
    """True when M(v, t) is identical before and after rewriting everything at or after t."""
    from conftest import random_graph

    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(4, 12)), int(rng.integers(10, 80)), n_times=int(rng.integers(5, 40)))
    it = g.log[int(rng.integers(len(g.log)))]
    v = int(rng.choice([it.src, it.dst]))
    t = it.timestamp + float(rng.choice([0.0, 0.5]))
    h = perturb_from(g, t, rng)
    c = int(rng.choice([2, 4, 8]))
    s = int(rng.integers(1, 5))
    bank_g = mock_bank(g, c=c, s=s)
    bank_h = mock_bank(h, c=c, s=s)
    model = DyGraspModel(small_config(L=int(rng.integers(1, 3))), seed=seed).attach(bank_g, until=t)
    model.eval()
    with torch.no_grad():
        a = model([v], [t])
        model.attach(bank_h)
        b = model([v], [t])
    return bool(torch.equal(a, b))


def causal_trial(backend, rng, vocab) -> bool:
    """Random prompt of whole-line spans; rewrite every token from a random cut on.

    True when the hidden-state rows before the cut are bitwise unchanged.
    """
    from dygrasp.llm import TokenizedPrompt

    n = int(rng.integers(2, 120))
    tokens = [int(x) for x in rng.choice(vocab, size=n)]
    spans, pos, sid = [], int(rng.integers(0, 4)), 1
    while pos < n:
        end = min(n - 1, pos + int(rng.integers(0, 8)))
        spans.append((sid, pos, end))
        sid += 1
        pos = end + 1 + int(rng.integers(0, 3))
    cut = int(rng.integers(1, n))
    other = tokens[:cut] + [int(x) for x in rng.choice(vocab, size=n - cut)]
    a = backend.hidden_states(TokenizedPrompt(tokens, spans))
    b = backend.hidden_states(TokenizedPrompt(other, spans))
    return bool(np.array_equal(a[:cut], b[:cut]))


def oracle_bank(g, trace, c, s, d_llm, d_bert):
    oracle = OracleBackend(trace, d_llm)
    encoder = MockEncoder(d_bert)
    recent = MemoryVectors(d_llm)
    for f in extract_recent_features(all_batches(g, c), oracle, g, RECENT):
        recent.put((f.node, f.interaction), f.vector)
    vecs = MemoryVectors(d_bert)
    chains = run_global(g, s, GLOBAL, oracle, encoder, None, vecs)
    return build_bank(g, encoder, recent, vecs, {v: ch.boundaries for v, ch in chains.items()})
