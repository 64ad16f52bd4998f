"""Node-centric implicit reasoning over sliding windows of a node's history."""

from __future__ import annotations

import logging
import threading
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .dytag import DyTAG, NeighborSequence, neighbor_sequence
from .errors import CapabilityError, ContextOverflowError, DyGraspError, ExtractionAborted
from .llm import LLMBackend, TokenizedPrompt, count_tokens, dispatch, encode_text
from .templates import PromptTemplate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowBatch:
    node: int
    index: int
    members: tuple[int, ...]            # interaction ids, chronological
    positions: tuple[int, ...]          # 1-based positions of members in the node's sequence
    target_positions: tuple[int, ...]   # subset of positions this batch yields features for
    roles: tuple[str, ...] = ()

    @property
    def context_size(self) -> int:
        return len(self.positions) - len(self.target_positions)


@dataclass(frozen=True)
class RecentFeature:
    node: int
    interaction: int
    vector: np.ndarray


def batch_ranges(n: int, c: int) -> list[tuple[int, int, int]]:
    """(first, last, first_target) 1-based position triples of the windows over n items."""
    if c < 2 or c % 2:
        raise ValueError("window length must be even")
    half = c // 2
    out = []
    if n == 0:
        return out
    out.append((1, min(c, n), 1))
    i = 1
    while half * i + half < n:
        out.append((half * i + 1, min(half * i + c, n), half * i + half + 1))
        i += 1
    return out


def build_batches(seq: NeighborSequence, c: int) -> list[WindowBatch]:
    batches = []
    for i, (first, last, first_target) in enumerate(batch_ranges(len(seq), c)):
        chunk = seq.items[first - 1 : last]
        batches.append(
            WindowBatch(
                node=seq.node,
                index=i,
                members=tuple(it.id for it, _ in chunk),
                positions=tuple(range(first, last + 1)),
                target_positions=tuple(range(first_target, last + 1)),
                roles=tuple(role for _, role in chunk),
            )
        )
    return batches


def _line(g: DyTAG, template: PromptTemplate, node: int, iid: int, role: str) -> str:
    it = g.log[iid]
    other = g.counterpart(it, node)
    return template.interaction_line(
        g.node_texts[node], role, g.node_texts[other], g.edge_text(it), it.timestamp
    )


def render_recent_prompt(
    batch: WindowBatch, template: PromptTemplate, g: DyTAG, backend: LLMBackend | None = None
) -> TokenizedPrompt:
    node_text = g.node_texts[batch.node]
    roles = batch.roles or tuple(
        "as_source" if g.log[i].src == batch.node else "as_destination" for i in batch.members
    )
    parts: list[tuple[str, int | None]] = []
    header = template.header(node_text)
    if header:
        parts.append((header, None))
    for iid, pos, role in zip(batch.members, batch.positions, roles):
        parts.append((_line(g, template, batch.node, iid, role), pos))
    footer = template.footer(node_text)
    if footer:
        parts.append((footer, None))
    tokens: list[int] = []
    spans = []
    for text, pos in parts:
        ids = encode_text(text)
        if pos is not None:
            if not ids:
                raise ValueError(f"interaction at position {pos} rendered to no tokens")
            spans.append((pos, len(tokens), len(tokens) + len(ids) - 1))
        tokens.extend(ids)
    if backend is not None and len(tokens) > backend.context_limit:
        raise ContextOverflowError(
            f"prompt for node {batch.node} batch {batch.index} has {len(tokens)} tokens "
            f"(limit {backend.context_limit}); use a smaller window length c",
            backend.context_limit,
        )
    return TokenizedPrompt(tokens, spans, "\n".join(t for t, _ in parts))


def pool_spans(states: np.ndarray, prompt: TokenizedPrompt, span_ids) -> dict[int, np.ndarray]:
    lookup = {sid: (a, b) for sid, a, b in prompt.span_index}
    return {sid: states[lookup[sid][0] : lookup[sid][1] + 1].mean(axis=0) for sid in span_ids}


def extract_recent_features(
    batches: list[WindowBatch],
    backend: LLMBackend,
    g: DyTAG,
    template: PromptTemplate,
    store=None,
    workers: int = 1,
    retries: int = 2,
) -> list[RecentFeature]:
    """Mean-pool each target interaction's span; persist keyed (node, interaction id).

    Batches whose targets are all in ``store`` already are skipped (resume).
    """
    if not backend.supports_hidden_states:
        raise CapabilityError(f"{backend.kind} backend cannot provide hidden states; recent reasoning refuses to run")
    lock = threading.Lock()

    def run(batch: WindowBatch):
        pos_to_iid = dict(zip(batch.positions, batch.members))
        targets = [(p, pos_to_iid[p]) for p in batch.target_positions]
        if store is not None and all(store.has((batch.node, iid)) for _, iid in targets):
            return [RecentFeature(batch.node, iid, store.get((batch.node, iid))) for _, iid in targets]
        prompt = render_recent_prompt(batch, template, g, backend)
        for attempt in range(retries + 1):
            try:
                states = backend.hidden_states(prompt)
                break
            except ContextOverflowError:
                raise
            except DyGraspError as exc:
                log.warning("batch (%d,%d) failed (attempt %d): %s", batch.node, batch.index, attempt + 1, exc)
        else:
            return None
        pooled = pool_spans(states, prompt, [p for p, _ in targets])
        feats = [RecentFeature(batch.node, iid, pooled[p]) for p, iid in targets]
        if store is not None:
            with lock:
                for f in feats:
                    store.put((f.node, f.interaction), f.vector)
        return feats

    results = dispatch(run, batches, workers)
    failed = [(b.node, b.index) for b, r in zip(batches, results) if r is None]
    if store is not None:
        store.flush()
    if failed:
        raise ExtractionAborted(
            f"{len(failed)} batches failed after {retries} retries; unprocessed (node, batch): {failed[:20]}; "
            "rerun with --resume to continue",
            failed,
        )
    return [f for r in results for f in r]


def all_batches(g: DyTAG, c: int, nodes=None) -> list[WindowBatch]:
    out = []
    for v in nodes if nodes is not None else g.nodes:
        out.extend(build_batches(neighbor_sequence(g, v), c))
    return out


def _histogram(per_node: dict[int, int]) -> dict[str, int]:
    hist: Counter = Counter()
    for total in per_node.values():
        hi = 1
        while hi < total:
            hi *= 2
        hist[hi] += 1
    return {f"<={k}": hist[k] for k in sorted(hist)}


def token_report(g: DyTAG, c: int, template: PromptTemplate, mode: str = "node_centric") -> dict:
    """Input-token accounting for recent reasoning; no LLM calls.

    node_centric counts every rendered window prompt. edge_centric simulates the
    per-interaction scheme where interaction i of node u (counterpart v) is sent
    with u's earlier interactions and v's interactions before it: 2(i-1)+1
    interactions on a regular graph.
    """
    mode = mode.replace("-", "_")
    if mode not in ("node_centric", "edge_centric"):
        raise ValueError(f"unknown mode {mode!r}")
    per_node: dict[int, int] = {}
    interaction_tokens = 0
    overhead_tokens = 0
    num_prompts = 0
    # tokens of every interaction rendered from each endpoint's perspective
    line_tokens: dict[int, list[int]] = {}
    seqs = {v: neighbor_sequence(g, v) for v in g.nodes}
    for v, seq in seqs.items():
        line_tokens[v] = [count_tokens(_line(g, template, v, it.id, role)) for it, role in seq.items]
    base = sum(sum(x) for x in line_tokens.values())

    if mode == "node_centric":
        for v, seq in seqs.items():
            node_total = 0
            for b in build_batches(seq, c):
                n = count_tokens(render_recent_prompt(b, template, g).text)
                span = sum(line_tokens[v][p - 1] for p in b.positions)
                interaction_tokens += span
                overhead_tokens += n - span
                node_total += n
                num_prompts += 1
            per_node[v] = node_total
    else:
        prefix = {v: np.concatenate([[0], np.cumsum(line_tokens[v])]) for v in seqs}
        times = {v: seqs[v].timestamps for v in seqs}
        for v, seq in seqs.items():
            node_total = 0
            overhead = count_tokens(template.header(g.node_texts[v])) + count_tokens(template.footer(g.node_texts[v]))
            for i, (it, _) in enumerate(seq.items):
                other = g.counterpart(it, v)
                k = bisect_left(times[other], it.timestamp)
                toks = int(prefix[v][i]) + line_tokens[v][i] + int(prefix[other][k])
                interaction_tokens += toks
                overhead_tokens += overhead
                node_total += toks + overhead
                num_prompts += 1
            per_node[v] = node_total
    return {
        "mode": mode,
        "window": c,
        "total_tokens": interaction_tokens + overhead_tokens,
        "interaction_tokens": interaction_tokens,
        "overhead_tokens": overhead_tokens,
        "base_interaction_tokens": base,
        "num_prompts": num_prompts,
        "per_node_histogram": _histogram(per_node),
    }
