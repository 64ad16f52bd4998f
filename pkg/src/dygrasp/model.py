"""Fusion network: recent and global semantic streams plus a temporal attention structure layer.

For a node v at query time t, layer l computes

    R(l)  transformer over v's recent events   [P(F_rc) | T(t - t_i)]
    G(l)  transformer over v's period chain     [P'(F_gb) | T(t - t_hat_i)], i <= i_hat
    S(l)  attention from v over its recent neighbors' M(l-1)
    M(l)  = MLP(mean R(l) | G(l)[i_hat] | S(l))

with M(0) = P''(encoded node text). Everything is batched over queries; the
neighbor recursion deduplicates (node, time) pairs at each depth.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .history import FeatureBank

CKPT_MAGIC = b"DYGM1\n"


@dataclass
class ModelConfig:
    L: int = 2
    d_t: int = 100
    d_SF: int = 256
    heads: int = 2
    dropout: float = 0.1
    n_neighbors: int = 20
    n_recent: int = 32
    tgnn_kind: str = "temporal_attention"
    use_recent: bool = True
    use_global: bool = True
    d_llm: int = 32
    d_bert: int = 768
    time_scale: float = 1.0
    ff_mult: int = 2
    input_rms: float = 4.0

    def __post_init__(self):
        for name in ("L", "d_t", "d_SF", "heads", "n_neighbors", "n_recent", "d_llm", "d_bert", "ff_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if (2 * self.d_t) % self.heads or self.d_SF % self.heads:
            raise ValueError("heads must divide 2*d_t and d_SF")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")
        if self.input_rms <= 0:
            raise ValueError("input_rms must be positive")
        if self.tgnn_kind not in TGNN_KINDS:
            raise ValueError(f"unknown tgnn_kind {self.tgnn_kind!r}; have {sorted(TGNN_KINDS)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config fields: {sorted(extra)}")
        return cls(**d)


def time_scale_for(timestamps: np.ndarray) -> float:
    """Mean gap between consecutive events, so one typical gap maps to ~1 time unit."""
    if len(timestamps) < 2:
        return 1.0
    span = float(timestamps.max() - timestamps.min())
    return span / (len(timestamps) - 1) if span > 0 else 1.0


def _inverse_rms(x: np.ndarray) -> float:
    flat = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
    rows = flat[np.abs(flat).sum(1) > 0]
    if len(rows) == 0:
        return 1.0
    rms = float(np.sqrt(np.mean(rows**2)))
    return 1.0 / rms if rms > 0 else 1.0


class TimeEncoder(nn.Module):
    def __init__(self, dim: int, time_scale: float = 1.0):
        super().__init__()
        self.time_scale = time_scale
        self.omega = nn.Parameter(torch.from_numpy(1.0 / 10 ** np.linspace(0, 6, dim)).float())
        self.phi = nn.Parameter(torch.zeros(dim))

    def forward(self, dt: torch.Tensor) -> torch.Tensor:
        if (dt < 0).any():
            raise ValueError("negative time delta: query precedes an event it reads (leakage)")
        return torch.cos((dt / self.time_scale).unsqueeze(-1) * self.omega + self.phi)


def masked_attention(q, k, v, mask, heads: int, dropout: nn.Module | None = None):
    """q (B,Q,D), k/v (B,K,D), mask (B,K) bool -> (B,Q,D). Fully masked rows give zeros."""
    B, Q, D = q.shape
    K = k.shape[1]
    hd = D // heads
    qh = q.view(B, Q, heads, hd).transpose(1, 2)
    kh = k.view(B, K, heads, hd).transpose(1, 2)
    vh = v.view(B, K, heads, hd).transpose(1, 2)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(hd)
    m = mask[:, None, None, :]
    scores = scores.masked_fill(~m, float("-inf"))
    any_key = mask.any(dim=1)[:, None, None, None]
    scores = torch.where(any_key, scores, torch.zeros_like(scores))
    w = torch.softmax(scores, dim=-1)
    w = torch.where(any_key, w, torch.zeros_like(w))
    if dropout is not None:
        w = dropout(w)
    return (w @ vh).transpose(1, 2).reshape(B, Q, D)


class EncoderBlock(nn.Module):
    """Pre-norm transformer encoder block with padding mask, no positional encoding."""

    def __init__(self, width: int, heads: int, dropout: float, ff_mult: int = 2):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, ff_mult * width), nn.GELU(), nn.Linear(ff_mult * width, width))
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        x = x + self.drop(self.out(masked_attention(q, k, v, mask, self.heads, self.drop)))
        x = x + self.drop(self.ff(self.norm2(x)))
        return x * mask.unsqueeze(-1)


class TemporalAttention(nn.Module):
    """One-hop attention from a node to its most recent neighbors.

    query [M_v | T(0)], keys/values [M_u | T(t - t_j) | P(F_rc_j)];
    S = W_self M_v + FFN(attention) when the node has neighbors, else W_self M_v.
    """

    def __init__(self, d_sf: int, d_t: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d_sf + d_t, d_sf)
        self.k = nn.Linear(d_sf + 2 * d_t, d_sf)
        self.v = nn.Linear(d_sf + 2 * d_t, d_sf)
        self.ffn = nn.Sequential(nn.Linear(d_sf, d_sf), nn.GELU(), nn.Linear(d_sf, d_sf))
        self.self_proj = nn.Linear(d_sf, d_sf, bias=False)
        self.drop = nn.Dropout(dropout)

    def forward(self, m_self, t_zero, m_nbr, t_nbr, edge, mask):
        q = self.q(torch.cat([m_self, t_zero], -1)).unsqueeze(1)
        kv_in = torch.cat([m_nbr, t_nbr, edge], -1)
        att = masked_attention(q, self.k(kv_in), self.v(kv_in), mask, self.heads, self.drop).squeeze(1)
        has = mask.any(dim=1, keepdim=True).to(m_self.dtype)
        return self.self_proj(m_self) + has * self.ffn(att)


TGNN_KINDS = {"temporal_attention": TemporalAttention}


class MergeLayer(nn.Module):
    def __init__(self, d_in: int, d_sf: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(d_in, d_sf), nn.GELU(), nn.Linear(d_sf, d_sf))

    def forward(self, r, g, s):
        return self.mlp(torch.cat([r, g, s], -1))


class LinkHead(nn.Module):
    def __init__(self, d_sf: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(2 * d_sf, d_sf), nn.GELU(), nn.Linear(d_sf, 1))
        nn.init.zeros_(self.mlp[2].weight)
        nn.init.zeros_(self.mlp[2].bias)

    def forward(self, m_u, m_v):
        return self.mlp(torch.cat([m_u, m_v], -1)).squeeze(-1)


class DyGraspModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        torch.manual_seed(seed)
        w = 2 * cfg.d_t
        self.time = TimeEncoder(cfg.d_t, cfg.time_scale)
        self.proj_recent = nn.Linear(cfg.d_llm, cfg.d_t)          # P
        self.proj_global = nn.Linear(cfg.d_bert, cfg.d_t)         # P'
        self.proj_node = nn.Linear(cfg.d_bert, cfg.d_SF)          # P''
        self.rs = nn.ModuleList(EncoderBlock(w, cfg.heads, cfg.dropout, cfg.ff_mult) for _ in range(cfg.L))
        self.gs = nn.ModuleList(EncoderBlock(w, cfg.heads, cfg.dropout, cfg.ff_mult) for _ in range(cfg.L))
        tgnn = TGNN_KINDS[cfg.tgnn_kind]
        self.structure = nn.ModuleList(tgnn(cfg.d_SF, cfg.d_t, cfg.heads, cfg.dropout) for _ in range(cfg.L))
        self.merge = nn.ModuleList(MergeLayer(2 * w + cfg.d_SF, cfg.d_SF) for _ in range(cfg.L))
        self.head = LinkHead(cfg.d_SF)
        # fixed input rescaling to per-coordinate RMS cfg.input_rms, calibrated on first attach
        self.register_buffer("input_scale", torch.ones(3))
        self.register_buffer("calibrated", torch.zeros((), dtype=torch.bool))
        self.bank: FeatureBank | None = None

    # -- data -------------------------------------------------------------
    def attach(self, bank: FeatureBank, until: float | None = None) -> "DyGraspModel":
        """Bind feature arrays. The first attach calibrates input scales on features
        available at time ``until`` (all of them when None)."""
        if self.cfg.use_recent and bank.recent is None:
            raise ValueError("model uses recent features but the bank has none")
        if self.cfg.use_global and bank.chain is None:
            raise ValueError("model uses global features but the bank has none")
        if bank.recent is not None and self.cfg.use_recent and bank.d_llm != self.cfg.d_llm:
            raise ValueError(f"bank d_llm {bank.d_llm} != model d_llm {self.cfg.d_llm}")
        if bank.d_bert != self.cfg.d_bert:
            raise ValueError(f"bank d_bert {bank.d_bert} != model d_bert {self.cfg.d_bert}")
        self.bank = bank
        if not bool(self.calibrated):
            recent, chain = bank.recent, bank.chain
            if until is not None:
                if recent is not None:
                    recent = recent[bank.index.time <= until]
                if chain is not None:
                    chain = chain[bank.bounds <= until]
            sources = [recent, chain, bank.node]
            scale = [self.cfg.input_rms * _inverse_rms(x) if x is not None else 1.0 for x in sources]
            self.input_scale.copy_(torch.tensor(scale, dtype=self.input_scale.dtype))
            self.calibrated.fill_(True)
        return self

    @property
    def dtype(self):
        return self.proj_node.weight.dtype

    def _t(self, arr) -> torch.Tensor:
        return torch.as_tensor(np.asarray(arr), dtype=self.dtype)

    # -- streams ----------------------------------------------------------
    def recent_input(self, nodes: np.ndarray, times: np.ndarray):
        """R(0) (B, n_recent, 2 d_t), mask (B, n_recent), plus the raw gather."""
        idx = self.bank.index
        gth = idx.recent(nodes, times, self.cfg.n_recent)
        self.bank.check_recent(gth.slots, gth.mask)
        feats = self.proj_recent(self._t(self.bank.recent[gth.slots]) * self.input_scale[0])
        dt = np.where(gth.mask, times[:, None] - idx.time[gth.slots], 0.0)
        x = torch.cat([feats, self.time(self._t(dt))], -1)
        mask = torch.as_tensor(gth.mask)
        return x * mask.unsqueeze(-1), mask

    def global_input(self, nodes: np.ndarray, times: np.ndarray):
        """G(0) (B, s+1, 2 d_t), mask (B, s+1), i_hat (B,)."""
        bounds = self.bank.bounds[nodes]
        i_hat = (bounds < times[:, None]).sum(1) - 1
        if (i_hat < 0).any():
            raise ValueError("query time precedes the chain start")
        mask_np = np.arange(bounds.shape[1])[None, :] <= i_hat[:, None]
        dt = np.where(mask_np, times[:, None] - bounds, 0.0)
        x = torch.cat([self.proj_global(self._t(self.bank.chain[nodes]) * self.input_scale[1]), self.time(self._t(dt))], -1)
        mask = torch.as_tensor(mask_np)
        return x * mask.unsqueeze(-1), mask, torch.as_tensor(i_hat)

    def readout_recent(self, r, mask):
        m = mask.unsqueeze(-1).to(r.dtype)
        return (r * m).sum(1) / m.sum(1).clamp(min=1.0)

    @staticmethod
    def readout_global(g, i_hat):
        return g[torch.arange(g.shape[0]), i_hat]

    # -- recursion --------------------------------------------------------
    def _represent(self, nodes: np.ndarray, times: np.ndarray, depth: int) -> list[torch.Tensor]:
        """[M(0), ..., M(depth)] for each (node, time) query."""
        cfg = self.cfg
        B = len(nodes)
        out = [self.proj_node(self._t(self.bank.node[nodes]) * self.input_scale[2])]
        if depth == 0:
            return out
        w = 2 * cfg.d_t
        zeros = torch.zeros(B, w, dtype=self.dtype)
        if cfg.use_recent:
            r, r_mask = self.recent_input(nodes, times)
        if cfg.use_global:
            g, g_mask, i_hat = self.global_input(nodes, times)

        idx = self.bank.index
        nb = idx.recent(nodes, times, cfg.n_neighbors)
        flat = nb.slots[nb.mask]
        nbr_nodes = idx.other[flat]
        nbr_times = idx.time[flat]
        nbr_reps: list[torch.Tensor] = []
        if len(flat):
            keys = nbr_nodes * (len(idx.unique_times) + 1) + np.searchsorted(idx.unique_times, nbr_times)
            uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
            reps = self._represent(nbr_nodes[first], nbr_times[first], depth - 1)
            nbr_reps = [rep[torch.as_tensor(inverse.reshape(-1))] for rep in reps]
        nb_mask = torch.as_tensor(nb.mask)
        dt = np.where(nb.mask, times[:, None] - idx.time[nb.slots], 0.0)
        t_nbr = self.time(self._t(dt))
        t_zero = self.time(torch.zeros(B, dtype=self.dtype))
        if cfg.use_recent:
            self.bank.check_recent(nb.slots, nb.mask)
            edge = self.proj_recent(self._t(self.bank.recent[nb.slots]) * self.input_scale[0]) * nb_mask.unsqueeze(-1)
        else:
            edge = torch.zeros(B, nb.slots.shape[1], cfg.d_t, dtype=self.dtype)
        mask_idx = torch.as_tensor(np.flatnonzero(nb.mask.reshape(-1)))

        for l in range(depth):
            if cfg.use_recent:
                r = self.rs[l](r, r_mask)
                r_out = self.readout_recent(r, r_mask)
            else:
                r_out = zeros
            if cfg.use_global:
                g = self.gs[l](g, g_mask)
                g_out = self.readout_global(g, i_hat)
            else:
                g_out = zeros
            m_nbr = torch.zeros(B * nb.slots.shape[1], cfg.d_SF, dtype=self.dtype)
            if len(flat):
                m_nbr = m_nbr.index_copy(0, mask_idx, nbr_reps[l])
            m_nbr = m_nbr.view(B, nb.slots.shape[1], cfg.d_SF)
            s = self.structure[l](out[l], t_zero, m_nbr, t_nbr, edge, nb_mask)
            out.append(self.merge[l](r_out, g_out, s))
        return out

    def forward(self, nodes, times) -> torch.Tensor:
        """M(L) for node ids (original ids) at query times."""
        nodes = self.bank.index.index_of(nodes)
        times = np.asarray(times, dtype=np.float64).reshape(-1)
        if len(nodes) != len(times):
            raise ValueError("nodes and times must have equal length")
        return self._represent(nodes, times, self.cfg.L)[-1]

    def represent_indexed(self, node_idx: np.ndarray, times: np.ndarray) -> torch.Tensor:
        return self._represent(node_idx, np.asarray(times, dtype=np.float64), self.cfg.L)[-1]

    def score_logits(self, m_u, m_v) -> torch.Tensor:
        return self.head(m_u, m_v)

    def score_link(self, m_u, m_v) -> torch.Tensor:
        return torch.sigmoid(self.head(m_u, m_v))

    # -- checkpoint -------------------------------------------------------
    def save(self, path: str | Path, extra: dict | None = None) -> None:
        state = self.state_dict()
        header = {
            "config": asdict(self.cfg), "seed": self.seed,
            "params": [[k, list(v.shape)] for k, v in state.items()],
            "extra": extra or {},
        }
        head = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<I", len(head)) + head)
            for v in state.values():
                fh.write(v.detach().cpu().numpy().astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> tuple["DyGraspModel", dict]:
        raw = Path(path).read_bytes()
        if not raw.startswith(CKPT_MAGIC):
            raise ValueError(f"{path}: not a model checkpoint")
        off = len(CKPT_MAGIC)
        (n,) = struct.unpack("<I", raw[off : off + 4])
        header = json.loads(raw[off + 4 : off + 4 + n])
        off += 4 + n
        model = cls(ModelConfig.from_dict(header["config"]), header["seed"])
        state = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
            state[name] = torch.from_numpy(arr.copy())
            off += 4 * count
        if off != len(raw):
            raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
        model.load_state_dict(state)
        return model, header["extra"]
