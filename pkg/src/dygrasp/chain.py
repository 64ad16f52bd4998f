"""Explicit reasoning: per-node segment partition and the chained period descriptions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dytag import DyTAG, NeighborSequence, neighbor_sequence
from .errors import CapabilityError, DyGraspError, ExtractionAborted
from .llm import LLMBackend, count_tokens, dispatch
from .templates import PromptTemplate

log = logging.getLogger(__name__)

START_TIME = -1.0
NO_DESCRIPTION = "(no description yet)"


@dataclass
class SegmentChain:
    node: int
    boundaries: list[float]          # t_hat_0 = -1, t_hat_1 .. t_hat_s
    segments: list[list[int]]        # interaction ids, S_1 .. S_s
    descriptions: list[str] = field(default_factory=list)   # D_0 .. D_s once filled
    prompt_tokens: list[tuple[int, int]] = field(default_factory=list)  # (interaction, other) per LLM call

    @property
    def s(self) -> int:
        return len(self.segments)


def partition_segments(
    seq: NeighborSequence, s: int, mode: str = "count", time_range: tuple[float, float] | None = None
) -> tuple[list[float], list[list[int]]]:
    """Split a chronological sequence into s segments with boundaries (t_{i-1}, t_i].

    ``count``: sizes differ by at most one (larger first); a cut never separates equal
    timestamps, it moves later instead. ``time``: equal-width windows over ``time_range``.
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    ts = seq.timestamps
    ids = [it.id for it, _ in seq.items]
    n = len(ids)
    if mode == "time":
        if time_range is None:
            time_range = (ts[0], ts[-1]) if n else (0.0, 0.0)
        lo, hi = time_range
        bounds = [START_TIME] + [lo + i * (hi - lo) / s for i in range(1, s)] + [hi]
        bounds = [START_TIME] + [max(b, START_TIME) for b in bounds[1:]]
        segs = [[i for i, t in zip(ids, ts) if bounds[k - 1] < t <= bounds[k]] for k in range(1, s + 1)]
        # anything beyond hi (time_range narrower than the data) joins the last segment
        segs[-1].extend(i for i, t in zip(ids, ts) if t > bounds[-1])
        if segs[-1] and ts[-1] > bounds[-1]:
            bounds[-1] = ts[-1]
        return bounds, segs
    if mode != "count":
        raise ValueError(f"unknown segmenting mode {mode!r}")
    if n == 0:
        return [START_TIME] * (s + 1), [[] for _ in range(s)]
    base, rem = divmod(n, s)
    sizes = [base + 1] * rem + [base] * (s - rem)
    cuts, acc, prev = [], 0, 0
    for size in sizes:
        acc += size
        cut = max(acc, prev)
        while 0 < cut < n and ts[cut] == ts[cut - 1]:
            cut += 1
        cuts.append(cut)
        prev = cut
    bounds = [START_TIME] + [ts[c - 1] if c > 0 else START_TIME for c in cuts]
    segs = [ids[a:b] for a, b in zip([0] + cuts[:-1], cuts)]
    return bounds, segs


def build_chain(g: DyTAG, node: int, s: int, mode: str = "count") -> SegmentChain:
    seq = neighbor_sequence(g, node)
    bounds, segs = partition_segments(seq, s, mode, g.time_range)
    return SegmentChain(node, bounds, segs)


def render_global_prompt(template: PromptTemplate, g: DyTAG, node: int, prev: str, segment: list[int]) -> tuple[str, int]:
    """Prompt text and the token count of its interaction lines."""
    node_text = g.node_texts[node]
    lines = []
    for iid in segment:
        it = g.log[iid]
        role = "as_source" if it.src == node else "as_destination"
        lines.append(template.interaction_line(
            node_text, role, g.node_texts[g.counterpart(it, node)], g.edge_text(it), it.timestamp))
    text = template.body(node_text, prev if prev.strip() else NO_DESCRIPTION, "\n".join(lines))
    return text, sum(count_tokens(x) for x in lines)


def run_chain(
    g: DyTAG, chain: SegmentChain, template: PromptTemplate, backend: LLMBackend,
    store=None, retries: int = 2,
) -> SegmentChain:
    """Fill D_0..D_s with D_i = LLM(D_{i-1}, S_i); empty segments carry D_{i-1} forward.

    With a store, an already persisted prefix D_0..D_k is reused and the chain resumes at k+1.
    """
    if not backend.supports_generation:
        raise CapabilityError(f"{backend.kind} backend cannot generate text")
    node = chain.node
    descs = [g.node_texts[node]]
    if store is not None:
        store.put((node, 0), descs[0])
        while len(descs) <= chain.s and store.has((node, len(descs))):
            descs.append(store.get((node, len(descs))))
    chain.descriptions = descs
    for i in range(len(descs), chain.s + 1):
        seg = chain.segments[i - 1]
        if not seg:
            d = descs[i - 1]
        else:
            prompt, inter = render_global_prompt(template, g, node, descs[i - 1], seg)
            chain.prompt_tokens.append((inter, backend.count_tokens(prompt) - inter))
            for attempt in range(retries + 1):
                try:
                    d = backend.generate(prompt)
                    break
                except DyGraspError as exc:
                    log.warning("generation for node %d segment %d failed (attempt %d): %s",
                                node, i, attempt + 1, exc)
            else:
                raise ExtractionAborted(f"node {node}: segment {i} failed after {retries} retries",
                                        [(node, i)])
        descs.append(d)
        if store is not None:
            store.put((node, i), d)
    return chain


def embed_chain(chain: SegmentChain, encoder, store=None) -> list[np.ndarray]:
    if len(chain.descriptions) != chain.s + 1:
        raise ValueError(f"chain for node {chain.node} is not filled")
    out = []
    for i, d in enumerate(chain.descriptions):
        if store is not None and store.has((chain.node, i)):
            vec = store.get((chain.node, i))
        else:
            vec = encoder.encode(d)
            if store is not None:
                store.put((chain.node, i), vec)
        out.append(vec)
    return out


def run_global(
    g: DyTAG, s: int, template: PromptTemplate, backend: LLMBackend, encoder,
    desc_store=None, vec_store=None, mode: str = "count", workers: int = 1, retries: int = 2,
    nodes=None,
) -> dict[int, SegmentChain]:
    """Per-node chains as serial lanes on a shared pool; each finished node is flushed."""
    nodes = list(nodes if nodes is not None else g.nodes)

    def lane(v):
        chain = build_chain(g, v, s, mode)
        try:
            run_chain(g, chain, template, backend, desc_store, retries)
            embed_chain(chain, encoder, vec_store)
        except ExtractionAborted as exc:
            return chain, exc
        finally:
            if desc_store is not None:
                desc_store.flush()
            if vec_store is not None:
                vec_store.flush()
        return chain, None

    results = dispatch(lane, nodes, workers)
    failed = [p for _, exc in results if exc is not None for p in exc.pending]
    if failed:
        raise ExtractionAborted(f"{len(failed)} chains incomplete; rerun with --resume", failed)
    return {c.node: c for c, _ in results}
