"""Synthetic DyTAGs with planted recent dependency and global drift, plus the oracle LLM.

Generative story (bipartite user -> item stream):

* each item sits in one (interest group, category) cell; item texts are opaque ids;
* each user holds a latent interest that flips to another group every
  ``drift_period`` of its own interactions;
* each interaction names a category in its edge text, except that with
  probability ``ambiguity_rate`` it says "notebook" and silently repeats the
  category of the user's interaction ``dependency_distance`` steps back;
* the destination is drawn from the cell (current interest, category).

The category is only visible through edge texts (the recent signal, which needs
context to disambiguate); the interest is only visible through the oracle's
period summaries (the global signal).
"""

from __future__ import annotations

import json

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dytag import DyTAG
from .llm import LLMBackend, TokenizedPrompt, hash_vectors, token_id, tokenize
from .recent import batch_ranges

INTEREST_WORDS = ["literature", "technology", "sports", "cooking", "travel", "music", "gardening", "fashion"]
CATEGORY_WORDS = ["book", "device", "garment", "tool", "ticket", "kit", "plant", "bag"]
AMBIGUOUS_WORD = "notebook"
USER_DESCRIPTION = "is a registered customer account of the online store"
ITEM_DESCRIPTION = "is a product listed in the catalog of the online store"


@dataclass
class SynthConfig:
    num_users: int = 100
    num_items: int = 320
    num_edges: int = 20000
    num_interests: int = 4
    num_categories: int = 4
    drift_period: int | None = None      # None: never flips
    ambiguity_rate: float = 0.5
    dependency_distance: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ValueError("ambiguity_rate must be in [0, 1]")
        if self.num_edges < self.num_users:
            raise ValueError("num_edges must be >= num_users")
        if not 1 <= self.num_interests <= len(INTEREST_WORDS):
            raise ValueError(f"num_interests must be in 1..{len(INTEREST_WORDS)}")
        if not 1 <= self.num_categories <= len(CATEGORY_WORDS):
            raise ValueError(f"num_categories must be in 1..{len(CATEGORY_WORDS)}")
        if self.num_items < self.num_interests * self.num_categories:
            raise ValueError("need at least one item per (interest, category) cell")
        if self.drift_period is not None and self.drift_period < 1:
            raise ValueError("drift_period must be positive")
        if self.dependency_distance < 1:
            raise ValueError("dependency_distance must be >= 1")


@dataclass
class SynthTrace:
    config: dict
    users: list[int]
    items: dict[int, tuple[int, int]]          # item id -> (interest, category)
    interest: list[int]                        # per interaction id, user's latent interest
    category: list[int]                        # per interaction id, true category
    ambiguous: list[bool]
    node_names: dict[int, str] = field(default_factory=dict)

    @property
    def dependency_distance(self) -> int:
        return self.config["dependency_distance"]

    def to_json(self) -> dict:
        d = asdict(self)
        d["items"] = {str(k): list(v) for k, v in self.items.items()}
        d["node_names"] = {str(k): v for k, v in self.node_names.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthTrace":
        return cls(
            config=d["config"], users=list(d["users"]),
            items={int(k): tuple(v) for k, v in d["items"].items()},
            interest=list(d["interest"]), category=list(d["category"]), ambiguous=list(d["ambiguous"]),
            node_names={int(k): v for k, v in d.get("node_names", {}).items()},
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "SynthTrace":
        return cls.from_json(json.loads(Path(path).read_text()))


def generate(cfg: SynthConfig) -> tuple[DyTAG, SynthTrace]:
    rng = np.random.default_rng(cfg.seed)
    U, K, C = cfg.num_users, cfg.num_interests, cfg.num_categories
    users = list(range(U))
    item_ids = list(range(U, U + cfg.num_items))
    items = {v: (j % K, (j // K) % C) for j, v in enumerate(item_ids)}
    cells: dict[tuple[int, int], list[int]] = {}
    for v, cell in items.items():
        cells.setdefault(cell, []).append(v)
    names = {u: f"u{u}" for u in users} | {v: f"i{v}" for v in item_ids}

    interest_now = rng.integers(K, size=U)
    history: dict[int, list[int]] = {u: [] for u in users}
    # every user appears at least once, the rest uniformly
    who = np.concatenate([rng.permutation(U), rng.integers(U, size=cfg.num_edges - U)])
    rows, edge_texts = [], {}
    tr_interest, tr_cat, tr_amb = [], [], []
    for e, u in enumerate(who.tolist()):
        n = len(history[u])
        if cfg.drift_period and n > 0 and n % cfg.drift_period == 0 and K > 1:
            interest_now[u] = (interest_now[u] + rng.integers(1, K)) % K
        k = int(interest_now[u])
        d = cfg.dependency_distance
        if n >= d and rng.random() < cfg.ambiguity_rate:
            cat, amb = history[u][n - d], True
            text = f"ordered a {AMBIGUOUS_WORD}"
        else:
            cat, amb = int(rng.integers(C)), False
            text = f"ordered a {CATEGORY_WORDS[cat]}"
        pool = cells[(k, cat)]
        v = pool[int(rng.integers(len(pool)))]
        history[u].append(cat)
        edge_texts[e] = text
        rows.append((u, v, e, float(e + 1)))
        tr_interest.append(k)
        tr_cat.append(cat)
        tr_amb.append(amb)
    # the name leads so the oracle can identify the node; the shared role words
    # keep the encoded node text from being a pure identity vector
    texts = {u: f"{names[u]} {USER_DESCRIPTION}" for u in users} | {v: f"{names[v]} {ITEM_DESCRIPTION}" for v in item_ids}
    g = DyTAG.from_records(texts, edge_texts, rows)
    # log ids equal row order because timestamps strictly increase
    trace = SynthTrace(asdict(cfg), users, items, tr_interest, tr_cat, tr_amb, names)
    return g, trace


def user_label(interest: int) -> str:
    return f"The customer is currently into {INTEREST_WORDS[interest]}."


def item_label(interest: int, category: int) -> str:
    return f"The shop sells {CATEGORY_WORDS[category]} items for {INTEREST_WORDS[interest]} fans."


class OracleBackend(LLMBackend):
    """Ground-truth LLM for synthetic graphs.

    Hidden states: category words map to fixed category vectors; "notebook" maps
    to the category it stands for when the disambiguating interaction is earlier
    in the same prompt, else to a dedicated "ambiguous" vector; other tokens are
    zero. Disambiguation only happens inside a user's own purchase history
    (spans naming an item), walking back ``dependency_distance`` such spans.

    Generation: the node's latent label as of the prompt's most recent purchase.
    """

    kind = "oracle"

    def __init__(self, trace: SynthTrace, d_llm: int = 16, seed: int = 0,
                 context_limit: int = 8192, max_generation_tokens: int = 192):
        super().__init__(d_llm, seed, context_limit, max_generation_tokens)
        self.trace = trace
        C = trace.config["num_categories"]
        vecs = hash_vectors([(seed << 16) + c + 1 for c in range(C + 1)], d_llm)
        self.category_vectors = vecs[:C]
        self.ambiguous_vector = vecs[C]
        self._cat_ids = {token_id(CATEGORY_WORDS[c]): c for c in range(C)}
        self._amb_id = token_id(AMBIGUOUS_WORD)
        self._item_ids = {token_id(trace.node_names.get(v, f"i{v}")) for v in trace.items}
        self._name_to_node = {trace.node_names.get(n, ("u" if n in set(trace.users) else "i") + str(n)): n
                              for n in list(trace.users) + list(trace.items)}
        self.unresolved = 0

    def fingerprint(self) -> dict:
        return {"backend": self.kind, "seed": self.seed, "d_llm": self.d_llm,
                "trace_seed": self.trace.config["seed"]}

    def hidden_states(self, prompt: TokenizedPrompt) -> np.ndarray:
        self._check_context(len(prompt.tokens))
        out = np.zeros((len(prompt.tokens), self.d_llm))
        dist = self.trace.dependency_distance
        user_spans: list[int | None] = []   # resolved category of each earlier user-view span
        for _, first, last in prompt.span_index:
            user_view = False
            span_cat = None
            for j in range(first, last + 1):
                tok = prompt.tokens[j]
                if tok in self._item_ids:
                    user_view = True
                elif tok in self._cat_ids:
                    span_cat = self._cat_ids[tok]
                    out[j] = self.category_vectors[span_cat]
                elif tok == self._amb_id:
                    res = None
                    if user_view and len(user_spans) >= dist:
                        res = user_spans[-dist]
                    if res is None:
                        out[j] = self.ambiguous_vector
                        self.unresolved += 1
                    else:
                        span_cat = res
                        out[j] = self.category_vectors[res]
            if user_view:
                user_spans.append(span_cat)
        return out

    def generate(self, prompt_text: str) -> str:
        self._check_context(len(tokenize(prompt_text)))
        node = None
        last_item = None
        for piece in tokenize(prompt_text):
            n = self._name_to_node.get(piece)
            if n is None:
                continue
            if node is None:
                node = n
            elif n in self.trace.items:
                last_item = n
        if node in self.trace.items:
            return self._cap(item_label(*self.trace.items[node]))
        if last_item is None:
            return self._cap("No purchases to profile.")
        return self._cap(user_label(self.trace.items[last_item][0]))


def count_unresolved(g: DyTAG, trace: SynthTrace, c: int) -> int:
    """Ambiguous user-side targets whose disambiguating chain leaves their window."""
    from .dytag import neighbor_sequence

    dist = trace.dependency_distance
    total = 0
    for u in trace.users:
        seq = neighbor_sequence(g, u)
        amb = [trace.ambiguous[it.id] for it, _ in seq.items]
        for first, last, first_target in batch_ranges(len(seq), c):
            for p in range(first_target, last + 1):
                q = p
                while amb[q - 1]:
                    q -= dist
                    if q < first:
                        total += 1
                        break
    return total


def regular_temporal_graph(num_nodes: int, d: int, seed: int = 0, edge_text: str = "w") -> DyTAG:
    """d rounds of random perfect matchings; round r happens at time r + 1.

    Every node ends with exactly d interactions, its i-th at time i.
    """
    if num_nodes % 2:
        raise ValueError("num_nodes must be even")
    rng = np.random.default_rng(seed)
    rows = []
    for r in range(d):
        perm = rng.permutation(num_nodes)
        for a, b in perm.reshape(-1, 2).tolist():
            rows.append((a, b, 0, float(r + 1)))
    names = {v: f"n{v}" for v in range(num_nodes)}
    return DyTAG.from_records(names, {0: edge_text}, rows)


def write_synthetic(g: DyTAG, trace: SynthTrace, directory: str | Path) -> None:
    from .dytag import write_dytag

    write_dytag(g, directory)
    trace.save(Path(directory) / "trace.json")
