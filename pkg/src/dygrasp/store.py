"""Resumable on-disk cache for reasoning outputs.

Layout per store (``CACHE_DIR/{recent,global,desc}``)::

    NAME.bin       MAGIC | u32 header length | JSON header padded to HEADER_SIZE | rows
    NAME.idx.json  {"generation": g, "entries": [[node, index, byte_offset], ...]}

Vector rows are little-endian float32; description rows are a u32 byte length
followed by UTF-8 text. The index is replaced atomically on every flush, so it
is the durable record: rows past the indexed region are unflushed residue and
get truncated on reopen.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
from pathlib import Path

import numpy as np

from .errors import DyGraspError, MissingCacheError, StaleCacheError

log = logging.getLogger(__name__)

MAGIC = b"DYGS1\n"
HEADER_SIZE = 1024
BODY = len(MAGIC) + 4 + HEADER_SIZE
KINDS = ("recent", "global", "descriptions")
FILE_NAMES = {"recent": "recent", "global": "global", "descriptions": "desc"}


class KeyCollision(DyGraspError):
    pass


def fingerprint_diff(a: dict, b: dict) -> list[str]:
    keys = sorted(set(a) | set(b))
    return [f"{k}: cached={a.get(k)!r} requested={b.get(k)!r}" for k in keys if a.get(k) != b.get(k)]


class FeatureStore:
    def __init__(self, cache_dir: str | Path, kind: str, dim: int | None = None,
                 fingerprint: dict | None = None, readonly: bool = False):
        if kind not in KINDS:
            raise ValueError(f"unknown store kind {kind!r}")
        self.kind = kind
        self.dir = Path(cache_dir)
        self.bin_path = self.dir / f"{FILE_NAMES[kind]}.bin"
        self.idx_path = self.dir / f"{FILE_NAMES[kind]}.idx.json"
        self.readonly = readonly
        self._lock = threading.Lock()
        self._pending: dict[tuple[int, int], object] = {}
        self._rows: dict[tuple[int, int], int] = {}      # key -> byte offset into body
        self._vectors: dict[tuple[int, int], np.ndarray] = {}
        self._texts: dict[tuple[int, int], str] = {}
        self.recovery: dict | None = None
        if self.bin_path.exists():
            self._open_existing(dim, fingerprint)
        else:
            if readonly:
                raise MissingCacheError(f"no {kind} cache at {self.bin_path}")
            if kind != "descriptions" and not dim:
                raise ValueError("vector store needs dim")
            self.dim = dim or 0
            self.fingerprint = dict(fingerprint or {})
            self.generation = 0
            self._end = 0
            self.dir.mkdir(parents=True, exist_ok=True)
            with open(self.bin_path, "wb") as fh:
                fh.write(self._header_bytes(0))
            self._write_index()

    # -- header / index -------------------------------------------------
    def _header_bytes(self, count: int) -> bytes:
        head = json.dumps({
            "format": 1, "kind": self.kind, "dim": self.dim, "count": count,
            "fingerprint": self.fingerprint, "generation": self.generation,
        }, sort_keys=True).encode()
        if len(head) > HEADER_SIZE:
            raise ValueError("fingerprint too large for cache header")
        return MAGIC + struct.pack("<I", len(head)) + head.ljust(HEADER_SIZE, b" ")

    def _write_index(self) -> None:
        entries = sorted(([k[0], k[1], off] for k, off in self._rows.items()), key=lambda e: e[2])
        tmp = self.idx_path.with_suffix(".json.tmp")
        with open(tmp, "w") as fh:
            json.dump({"generation": self.generation, "count": len(entries), "entries": entries}, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.idx_path)

    def _open_existing(self, dim, fingerprint) -> None:
        raw = self.bin_path.read_bytes()
        if len(raw) < BODY or not raw.startswith(MAGIC):
            raise DyGraspError(f"{self.bin_path}: not a feature cache (bad header)")
        (hlen,) = struct.unpack("<I", raw[len(MAGIC) : len(MAGIC) + 4])
        header = json.loads(raw[len(MAGIC) + 4 : len(MAGIC) + 4 + hlen])
        if header["kind"] != self.kind:
            raise DyGraspError(f"{self.bin_path}: holds {header['kind']}, expected {self.kind}")
        self.fingerprint = header["fingerprint"]
        self.dim = header["dim"]
        self.generation = header["generation"]
        if fingerprint is not None and dict(fingerprint) != self.fingerprint:
            diff = "; ".join(fingerprint_diff(self.fingerprint, dict(fingerprint)))
            raise StaleCacheError(f"{self.bin_path}: cache was built with a different configuration ({diff}); "
                                  "delete it or rerun the reasoning stage")
        if dim is not None and self.kind != "descriptions" and dim != self.dim:
            raise StaleCacheError(f"{self.bin_path}: dim {self.dim} cached, {dim} requested")
        entries = []
        if self.idx_path.exists():
            idx = json.loads(self.idx_path.read_text())
            if idx["generation"] != self.generation:
                raise DyGraspError(f"{self.idx_path}: index generation {idx['generation']} does not match "
                                   f"cache generation {self.generation}")
            entries = sorted(idx["entries"], key=lambda e: e[2])
        body = raw[BODY:]
        durable = 0
        end = 0
        for node, i, off in entries:
            if self.kind == "descriptions":
                if off + 4 > len(body):
                    break
                (n,) = struct.unpack("<I", body[off : off + 4])
                if off + 4 + n > len(body):
                    break
                self._texts[(node, i)] = body[off + 4 : off + 4 + n].decode("utf-8")
                stop = off + 4 + n
            else:
                stop = off + 4 * self.dim
                if stop > len(body):
                    break
                self._vectors[(node, i)] = np.frombuffer(body[off:stop], dtype="<f4").copy()
            self._rows[(node, i)] = off
            end = stop
            durable += 1
        self._end = end
        if durable < len(entries) or len(body) > end:
            self.recovery = {"indexed": len(entries), "durable": durable, "discarded_bytes": len(body) - end}
            log.warning("%s: recovered %d of %d indexed entries (%d trailing bytes discarded)",
                        self.bin_path, durable, len(entries), len(body) - end)
            if not self.readonly:
                with open(self.bin_path, "r+b") as fh:
                    fh.truncate(BODY + end)
                    fh.seek(0)
                    fh.write(self._header_bytes(durable))
                self._write_index()

    # -- public API -----------------------------------------------------
    def __len__(self) -> int:
        return len(self._rows) + len(self._pending)

    @property
    def durable_count(self) -> int:
        return len(self._rows)

    def _encode(self, value) -> bytes:
        if self.kind == "descriptions":
            data = str(value).encode("utf-8")
            return struct.pack("<I", len(data)) + data
        arr = np.asarray(value)
        if arr.shape != (self.dim,):
            raise ValueError(f"vector of shape {arr.shape} does not match store dim {self.dim}")
        return arr.astype("<f4").tobytes()

    def put(self, key, value) -> None:
        key = (int(key[0]), int(key[1]))
        if self.readonly:
            raise DyGraspError("store opened read-only")
        if self.kind == "descriptions":
            value = str(value)
        else:
            value = np.asarray(value)
            if value.shape != (self.dim,):
                raise ValueError(f"vector of shape {value.shape} does not match store dim {self.dim}")
            value = value.astype("<f4")
        with self._lock:
            old = self._pending.get(key)
            if old is None and key in self._rows:
                old = self._texts[key] if self.kind == "descriptions" else self._vectors[key]
            if old is not None:
                same = old == value if self.kind == "descriptions" else np.array_equal(
                    np.asarray(old).view(np.uint32), value.view(np.uint32))
                if not same:
                    raise KeyCollision(f"{self.kind} cache already holds a different value for key {key}")
                return
            self._pending[key] = value

    def has(self, key) -> bool:
        key = (int(key[0]), int(key[1]))
        return key in self._rows or key in self._pending

    def get(self, key):
        key = (int(key[0]), int(key[1]))
        if key in self._pending:
            return self._pending[key]
        if key not in self._rows:
            raise KeyError(f"{self.kind} cache has no entry {key}")
        return self._texts[key] if self.kind == "descriptions" else self._vectors[key]

    def keys(self) -> list[tuple[int, int]]:
        return sorted(set(self._rows) | set(self._pending))

    def flush(self) -> None:
        with self._lock:
            if not self._pending:
                return
            items = sorted(self._pending.items())
            with open(self.bin_path, "r+b") as fh:
                fh.truncate(BODY + self._end)
                fh.seek(BODY + self._end)
                for key, value in items:
                    data = self._encode(value)
                    fh.write(data)
                    self._rows[key] = self._end
                    self._end += len(data)
                    if self.kind == "descriptions":
                        self._texts[key] = value
                    else:
                        self._vectors[key] = value
                fh.seek(0)
                fh.write(self._header_bytes(len(self._rows)))
                fh.flush()
                os.fsync(fh.fileno())
            self._pending.clear()
            self._write_index()

    def compact(self) -> None:
        """Rewrite rows in key order so the file is independent of write history."""
        self.flush()
        with self._lock:
            order = sorted(self._rows)
            if [self._rows[k] for k in order] == sorted(self._rows.values()):
                return
            self.generation += 1
            tmp = self.bin_path.with_suffix(".bin.tmp")
            rows, end = {}, 0
            with open(tmp, "wb") as fh:
                fh.write(self._header_bytes(len(order)))
                for key in order:
                    data = self._encode(self._texts[key] if self.kind == "descriptions" else self._vectors[key])
                    fh.write(data)
                    rows[key] = end
                    end += len(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.bin_path)
            self._rows, self._end = rows, end
            self._write_index()

    def matrix(self, keys) -> np.ndarray:
        out = np.empty((len(keys), self.dim), dtype=np.float32)
        for r, k in enumerate(keys):
            out[r] = self.get(k)
        return out


def fingerprint_for(backend_fp: dict, template_digest: str, **extra) -> dict:
    fp = dict(backend_fp)
    fp["template"] = template_digest
    fp.update(extra)
    return fp
