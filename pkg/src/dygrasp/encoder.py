"""Text -> fixed-width vector encoders (stand-ins for a sentence encoder such as BERT)."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache

import httpx
import numpy as np

from .errors import BackendError

WORD_RE = re.compile(r"\w+")


@dataclass
class EncoderConfig:
    kind: str = "mock"
    d_bert: int = 768
    seed: int = 0
    endpoint: str | None = None
    timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in ("mock", "remote"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.d_bert < 8:
            raise ValueError("d_bert must be >= 8")


class MockEncoder:
    """Bag of hashed words: sum of per-word unit vectors, then unit-normalized."""

    kind = "mock"

    def __init__(self, dim: int = 768, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._word = lru_cache(maxsize=1 << 16)(self._word_vector)

    def _word_vector(self, word: str) -> np.ndarray:
        h = int.from_bytes(hashlib.blake2b(f"{self.seed}\x00{word}".encode(), digest_size=8).digest(), "little")
        v = np.random.default_rng(h).standard_normal(self.dim)
        v /= np.linalg.norm(v)
        v.setflags(write=False)
        return v

    def fingerprint(self) -> dict:
        return {"encoder": self.kind, "d_bert": self.dim, "encoder_seed": self.seed}

    def encode(self, text: str) -> np.ndarray:
        words = WORD_RE.findall(text.lower())
        if not words:
            return np.zeros(self.dim)
        out = np.zeros(self.dim)
        for w in words:
            out += self._word(w)
        norm = np.linalg.norm(out)
        return out / norm if norm > 0 else out


class RemoteEncoder:
    """POST /v1/encode {"text": ...} -> {"vector": [...]}."""

    kind = "remote"

    def __init__(self, endpoint: str, dim: int, timeout: float = 30.0, transport=None):
        self.dim = dim
        self.endpoint = endpoint.rstrip("/")
        self._client = httpx.Client(base_url=self.endpoint, timeout=timeout, transport=transport)

    def fingerprint(self) -> dict:
        return {"encoder": self.kind, "d_bert": self.dim, "encoder_endpoint": self.endpoint}

    def encode(self, text: str) -> np.ndarray:
        if not text.strip():
            return np.zeros(self.dim)
        try:
            resp = self._client.post("/v1/encode", json={"text": text})
        except httpx.HTTPError as exc:
            raise BackendError(f"encoder transport failure: {exc!r}") from exc
        if resp.status_code != 200:
            raise BackendError(f"encoder returned HTTP {resp.status_code}")
        vec = np.asarray(resp.json()["vector"], dtype=np.float64)
        if vec.shape != (self.dim,):
            raise BackendError(f"encoder returned shape {vec.shape}, expected ({self.dim},)")
        return vec


def make_encoder(cfg: EncoderConfig, transport=None):
    if cfg.kind == "mock":
        return MockEncoder(cfg.d_bert, cfg.seed)
    if not cfg.endpoint:
        raise ValueError("remote encoder needs an endpoint")
    return RemoteEncoder(cfg.endpoint, cfg.d_bert, cfg.timeout, transport)
