"""Array view of a DyTAG plus its cached features, for batched lookups by (node, time)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dytag import DyTAG
from .errors import MissingCacheError


@dataclass
class Gather:
    """Left-aligned per-query windows of a node's most recent events before t."""

    slots: np.ndarray     # (B, W) CSR slot ids, 0 where masked
    mask: np.ndarray      # (B, W) bool
    counts: np.ndarray    # (B,)


class HistoryIndex:
    """Per-node chronological event lists in CSR form.

    Slot k of node n (``indptr[n] <= k < indptr[n+1]``) holds the k-th incident
    interaction of n: its time, counterpart and interaction id. ``twin[k]`` is the
    slot of the same interaction in the counterpart's list.
    """

    def __init__(self, g: DyTAG):
        self.nodes = np.array(g.nodes, dtype=np.int64)
        self.num_nodes = len(self.nodes)
        self._pos = {int(v): i for i, v in enumerate(self.nodes)}
        src = np.array([it.src for it in g.log], dtype=np.int64)
        dst = np.array([it.dst for it in g.log], dtype=np.int64)
        ts = g.timestamps
        ids = np.arange(len(g.log), dtype=np.int64)
        s_idx = self.index_of(src) if len(src) else src
        d_idx = self.index_of(dst) if len(dst) else dst
        loops = s_idx == d_idx
        owner = np.concatenate([s_idx, d_idx[~loops]])
        other = np.concatenate([d_idx, s_idx[~loops]])
        iid = np.concatenate([ids, ids[~loops]])
        time = np.concatenate([ts, ts[~loops]])
        order = np.lexsort((iid, owner))   # by node, then chronological id
        self.owner = owner[order]
        self.other = other[order]
        self.iid = iid[order]
        self.time = time[order]
        self.indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.owner, minlength=self.num_nodes), out=self.indptr[1:])
        self.unique_times = np.unique(ts)
        self._stride = len(self.unique_times) + 1
        self._keys = self.owner * self._stride + np.searchsorted(self.unique_times, self.time)
        pair = self.owner * (len(g.log) + 1) + self.iid
        twin_key = self.other * (len(g.log) + 1) + self.iid
        sorter = np.argsort(pair)
        self.twin = sorter[np.searchsorted(pair, twin_key, sorter=sorter)]

    def index_of(self, node_ids) -> np.ndarray:
        try:
            return np.array([self._pos[int(v)] for v in np.atleast_1d(node_ids)], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown node {exc.args[0]}") from None

    @property
    def num_slots(self) -> int:
        return len(self.owner)

    def count_before(self, nodes: np.ndarray, times: np.ndarray) -> np.ndarray:
        """Per query, the end slot (exclusive) of events strictly before t."""
        q = nodes * self._stride + np.searchsorted(self.unique_times, times, side="left")
        return np.searchsorted(self._keys, q, side="left")

    def recent(self, nodes: np.ndarray, times: np.ndarray, width: int) -> Gather:
        end = self.count_before(nodes, times)
        start = np.maximum(self.indptr[nodes], end - width)
        counts = end - start
        offs = np.arange(width)[None, :]
        mask = offs < counts[:, None]
        slots = np.where(mask, start[:, None] + offs, 0)
        return Gather(slots, mask, counts)


class FeatureBank:
    """Dense tensors of everything the model reads, aligned to a HistoryIndex.

    recent: (num_slots, d_llm) per-slot features from the owner's sequence.
    node: (num_nodes, d_bert) encoded node texts.
    bounds / chain: (num_nodes, s+1) boundaries and (num_nodes, s+1, d_bert) embeddings.
    Any part may be None when its stage was not run or is ablated.
    """

    def __init__(self, index: HistoryIndex, node: np.ndarray, recent=None, recent_present=None,
                 bounds=None, chain=None):
        self.index = index
        self.node = node
        self.recent = recent
        self.recent_present = recent_present
        self.bounds = bounds
        self.chain = chain

    @property
    def d_llm(self) -> int | None:
        return None if self.recent is None else self.recent.shape[1]

    @property
    def d_bert(self) -> int:
        return self.node.shape[1]

    def check_recent(self, slots: np.ndarray, mask: np.ndarray) -> None:
        if self.recent is None:
            raise MissingCacheError("recent features are not loaded; run `dygrasp reason recent`")
        bad = mask & ~self.recent_present[slots]
        if bad.any():
            k = int(slots[bad][0])
            node = int(self.index.nodes[self.index.owner[k]])
            raise MissingCacheError(f"no recent feature for (node {node}, interaction {int(self.index.iid[k])}); "
                                    "run `dygrasp reason recent`")


def build_bank(g: DyTAG, encoder, recent_store=None, global_store=None, chains=None,
               index: HistoryIndex | None = None) -> FeatureBank:
    """Collect cached features into arrays. ``chains`` maps node -> boundaries."""
    index = index or HistoryIndex(g)
    node = np.stack([np.asarray(encoder.encode(g.node_texts[int(v)]), dtype=np.float32) for v in index.nodes])
    recent = present = None
    if recent_store is not None:
        recent = np.zeros((index.num_slots, recent_store.dim), dtype=np.float32)
        present = np.zeros(index.num_slots, dtype=bool)
        for k in range(index.num_slots):
            key = (int(index.nodes[index.owner[k]]), int(index.iid[k]))
            if recent_store.has(key):
                recent[k] = recent_store.get(key)
                present[k] = True
    bounds = chain = None
    if global_store is not None:
        if chains is None:
            raise ValueError("global features need the chain boundaries")
        s1 = len(next(iter(chains.values())))
        bounds = np.full((index.num_nodes, s1), -1.0)
        chain = np.zeros((index.num_nodes, s1, global_store.dim), dtype=np.float32)
        for n, v in enumerate(index.nodes.tolist()):
            b = chains.get(v)
            if b is None:
                raise MissingCacheError(f"no segment chain for node {v}; run `dygrasp reason global`")
            bounds[n] = b
            for i in range(s1):
                if not global_store.has((v, i)):
                    raise MissingCacheError(f"no global feature for (node {v}, segment {i}); "
                                            "run `dygrasp reason global`")
                chain[n, i] = global_store.get((v, i))
    return FeatureBank(index, node, recent, present, bounds, chain)
