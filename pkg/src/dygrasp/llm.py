"""LLM access: tokenizer, causal hidden states, generation.

Three backends share one surface: ``MockBackend`` (deterministic, hash-seeded),
the synthetic oracle (see :mod:`dygrasp.synth`) and ``RemoteBackend`` speaking
the JSON wire protocol of a self-hosted inference server.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence, TypeVar

import httpx
import numpy as np

from .errors import BackendError, CapabilityError, ContextOverflowError, TransientBackendError

log = logging.getLogger(__name__)

TOKEN_RE = re.compile(r"\w+|[^\w\s]")
MASK64 = (1 << 64) - 1

# content-word filter for the mock summarizer
STOPWORDS = frozenset(
    """a an and are as at be by for from has have he her his i in is it its of on or our she
    that the their them they this to was were will with you your not but so if then than
    into over under about after before while who whom which what when where why how all any
    each few more most other some such only own same too very can just do does did done
    node user item interaction interactions time previous description summary summarize
    following period current""".split()
)


def tokenize(text: str) -> list[str]:
    """Whitespace/punctuation splitter: runs of word characters, or single symbols."""
    return TOKEN_RE.findall(text)


@lru_cache(maxsize=1 << 18)
def token_id(piece: str) -> int:
    return int.from_bytes(hashlib.blake2b(piece.encode("utf-8"), digest_size=4).digest(), "little")


def encode_text(text: str) -> list[int]:
    return [token_id(p) for p in tokenize(text)]


def count_tokens(text: str) -> int:
    return len(tokenize(text))


@dataclass
class TokenizedPrompt:
    tokens: list[int]
    span_index: list[tuple[int, int, int]]  # (span_id, first_token, last_token), inclusive
    text: str = ""

    def __post_init__(self):
        seen = set()
        prev_last = -1
        for sid, first, last in self.span_index:
            if sid in seen:
                raise ValueError(f"duplicate span id {sid}")
            seen.add(sid)
            if not (prev_last < first <= last < len(self.tokens)):
                raise ValueError(f"span {sid} [{first},{last}] overlaps or is out of bounds")
            prev_last = last

    def span(self, span_id: int) -> tuple[int, int]:
        for sid, first, last in self.span_index:
            if sid == span_id:
                return first, last
        raise KeyError(span_id)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _mix(h: int, tok: int) -> int:
    # scalar splitmix step, used for the rolling prefix hash
    x = (h ^ ((tok + 0x632BE59BD9B4E019) * 0x9E3779B97F4A7C15)) & MASK64
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def hash_vectors(keys: Sequence[int], dim: int) -> np.ndarray:
    """Unit-norm pseudo-random rows, one per 64-bit key."""
    k = np.asarray(keys, dtype=np.uint64)[:, None]
    lanes = np.arange(1, dim + 1, dtype=np.uint64)[None, :] * np.uint64(0xD1B54A32D192ED03)
    with np.errstate(over="ignore"):
        bits = _splitmix64(k ^ lanes)
    u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    v = 2.0 * u - 1.0
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class BackendConfig:
    kind: str = "mock"
    d_llm: int = 32
    seed: int = 0
    endpoint: str | None = None
    max_generation_tokens: int = 192
    context_limit: int = 8192
    layer: str = "last"
    timeout: float = 30.0
    retries: int = 3
    hidden_states: bool = True

    def __post_init__(self):
        if self.kind not in ("mock", "oracle", "remote"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.d_llm < 8:
            raise ValueError("d_llm must be >= 8")
        if self.max_generation_tokens < 1:
            raise ValueError("max_generation_tokens must be positive")


class LLMBackend:
    """Common surface; subclasses override what they support."""

    kind = "base"
    supports_hidden_states = True
    supports_generation = True

    def __init__(self, d_llm: int, seed: int = 0, context_limit: int = 8192, max_generation_tokens: int = 192):
        if d_llm < 8:
            raise ValueError("d_llm must be >= 8")
        self.d_llm = d_llm
        self.seed = seed
        self.context_limit = context_limit
        self.max_generation_tokens = max_generation_tokens

    def fingerprint(self) -> dict:
        return {"backend": self.kind, "seed": self.seed, "d_llm": self.d_llm}

    def count_tokens(self, text: str) -> int:
        return count_tokens(text)

    def _check_context(self, n_tokens: int) -> None:
        if n_tokens > self.context_limit:
            raise ContextOverflowError(
                f"prompt has {n_tokens} tokens, context limit is {self.context_limit}", self.context_limit
            )

    def _cap(self, text: str) -> str:
        """Truncate generated text to max_generation_tokens tokens."""
        pieces = list(TOKEN_RE.finditer(text))
        if len(pieces) <= self.max_generation_tokens:
            return text
        return text[: pieces[self.max_generation_tokens - 1].end()]

    def hidden_states(self, prompt: TokenizedPrompt) -> np.ndarray:
        raise CapabilityError(f"{self.kind} backend has no hidden-state capability")

    def generate(self, prompt_text: str) -> str:
        raise CapabilityError(f"{self.kind} backend has no generation capability")


class MockBackend(LLMBackend):
    """Deterministic stand-in. Row j of the hidden states is a unit vector
    seeded by a rolling hash of tokens[0..j], so it is causal by construction."""

    kind = "mock"

    def hidden_states(self, prompt: TokenizedPrompt) -> np.ndarray:
        self._check_context(len(prompt.tokens))
        if not prompt.tokens:
            return np.zeros((0, self.d_llm))
        h = _mix(0x5EED, self.seed)
        keys = []
        for tok in prompt.tokens:
            h = _mix(h, tok)
            keys.append(h)
        return hash_vectors(keys, self.d_llm)

    def generate(self, prompt_text: str, k: int = 8) -> str:
        self._check_context(count_tokens(prompt_text))
        digest = hashlib.blake2b(f"{self.seed}\x00{prompt_text}".encode(), digest_size=4).hexdigest()
        words = [w.lower() for w in tokenize(prompt_text) if w.isalpha() and len(w) > 2]
        counts = Counter(w for w in words if w not in STOPWORDS)
        first = {}
        for i, w in enumerate(words):
            first.setdefault(w, i)
        top = sorted(counts, key=lambda w: (-counts[w], first[w]))[:k]
        return self._cap(f"SUMMARY[{digest}]: " + (" ".join(top) if top else "none"))


@dataclass
class TokenCount:
    n: int
    estimated: bool


class RemoteBackend(LLMBackend):
    """Client for a self-hosted inference server.

    POST /v1/hidden_states {"tokens": [...], "layer": "last"} -> {"vectors": [[...], ...]}
    POST /v1/generate {"prompt": "...", "max_tokens": N} -> {"text": "...", "usage": {...}}
    """

    kind = "remote"

    def __init__(
        self,
        endpoint: str,
        d_llm: int,
        api_key: str | None = None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        layer: str = "last",
        hidden_states: bool = True,
        context_limit: int = 8192,
        max_generation_tokens: int = 192,
        transport: httpx.BaseTransport | None = None,
    ):
        super().__init__(d_llm, 0, context_limit, max_generation_tokens)
        self.endpoint = endpoint.rstrip("/")
        self.layer = layer
        self.retries = retries
        self.backoff = backoff
        self.supports_hidden_states = hidden_states
        self.retry_events: list[dict] = []
        self._usage: dict[str, int] = {}
        key = api_key if api_key is not None else os.environ.get("DYGRASP_API_KEY")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(base_url=self.endpoint, headers=headers, timeout=timeout, transport=transport)

    def fingerprint(self) -> dict:
        return {"backend": self.kind, "endpoint": self.endpoint, "layer": self.layer, "d_llm": self.d_llm}

    def _post(self, path: str, payload: dict) -> dict:
        attempt = 0
        while True:
            try:
                resp = self._client.post(path, json=payload)
            except httpx.HTTPError as exc:
                err: Exception = TransientBackendError(f"POST {path}: {exc!r}")
            else:
                if resp.status_code == 404:
                    raise CapabilityError(f"server has no {path} endpoint")
                if resp.status_code >= 500 or resp.status_code == 429:
                    err = TransientBackendError(f"POST {path}: HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise BackendError(f"POST {path}: HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    return resp.json()
            if attempt >= self.retries:
                raise err
            attempt += 1
            self.retry_events.append({"path": path, "attempt": attempt, "error": str(err)})
            log.warning("retrying %s (attempt %d): %s", path, attempt, err)
            time.sleep(self.backoff * 2 ** (attempt - 1))

    def hidden_states(self, prompt: TokenizedPrompt) -> np.ndarray:
        if not self.supports_hidden_states:
            raise CapabilityError("remote backend is configured without hidden-state access")
        self._check_context(len(prompt.tokens))
        out = self._post("/v1/hidden_states", {"tokens": list(prompt.tokens), "layer": self.layer})
        vec = np.asarray(out["vectors"], dtype=np.float64)
        if vec.shape != (len(prompt.tokens), self.d_llm):
            raise BackendError(f"hidden_states shape {vec.shape}, expected ({len(prompt.tokens)}, {self.d_llm})")
        return vec

    def generate(self, prompt_text: str) -> str:
        out = self._post("/v1/generate", {"prompt": prompt_text, "max_tokens": self.max_generation_tokens})
        text = out.get("text", "")
        if not text:
            raise BackendError("server returned empty generation")
        usage = out.get("usage") or {}
        if "prompt_tokens" in usage:
            self._usage[prompt_text] = int(usage["prompt_tokens"])
        return text

    def count_tokens_detailed(self, text: str) -> TokenCount:
        if text in self._usage:
            return TokenCount(self._usage[text], estimated=False)
        return TokenCount(count_tokens(text), estimated=True)

    def count_tokens(self, text: str) -> int:
        return self.count_tokens_detailed(text).n


def make_backend(cfg: BackendConfig, trace=None, transport=None) -> LLMBackend:
    if cfg.kind == "mock":
        return MockBackend(cfg.d_llm, cfg.seed, cfg.context_limit, cfg.max_generation_tokens)
    if cfg.kind == "oracle":
        from .synth import OracleBackend

        if trace is None:
            raise ValueError("oracle backend needs the synthetic trace")
        return OracleBackend(trace, cfg.d_llm, cfg.seed, cfg.context_limit, cfg.max_generation_tokens)
    if not cfg.endpoint:
        raise ValueError("remote backend needs an endpoint")
    return RemoteBackend(
        cfg.endpoint, cfg.d_llm, timeout=cfg.timeout, retries=cfg.retries, layer=cfg.layer,
        hidden_states=cfg.hidden_states, context_limit=cfg.context_limit,
        max_generation_tokens=cfg.max_generation_tokens, transport=transport,
    )


T = TypeVar("T")
R = TypeVar("R")


def dispatch(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Run fn over items on a bounded pool; results keep input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
