"""Dynamic text-attributed graph: data model, CSV loading, chronological views and splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataFormatError

log = logging.getLogger(__name__)

AS_SOURCE = "as_source"
AS_DESTINATION = "as_destination"


@dataclass(frozen=True, slots=True)
class Interaction:
    id: int
    src: int
    dst: int
    edge_text_ref: int
    timestamp: float


@dataclass(frozen=True)
class NeighborSequence:
    node: int
    items: tuple[tuple[Interaction, str], ...]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def interactions(self) -> list[Interaction]:
        return [i for i, _ in self.items]

    @property
    def timestamps(self) -> list[float]:
        return [i.timestamp for i, _ in self.items]


@dataclass(frozen=True)
class Split:
    train: range
    val: range
    test: range
    boundary_times: tuple[float, float]


@dataclass(frozen=True)
class DyTAG:
    node_texts: Mapping[int, str]
    edge_texts: Mapping[int, str]
    log: tuple[Interaction, ...]
    is_bipartite: bool
    time_range: tuple[float, float]
    allow_self_loops: bool = field(default=False, compare=False)

    @classmethod
    def from_records(
        cls,
        node_texts: Mapping[int, str],
        edge_texts: Mapping[int, str],
        rows: Iterable[tuple[int, int, int, float]],
        allow_self_loops: bool = False,
    ) -> "DyTAG":
        """Build from unsorted (src, dst, edge_text_id, timestamp) rows, in file order."""
        rows = list(rows)
        for n, (src, dst, ref, ts) in enumerate(rows):
            if src not in node_texts:
                raise DataFormatError(f"unknown node {src}")
            if dst not in node_texts:
                raise DataFormatError(f"unknown node {dst}")
            if ref not in edge_texts:
                raise DataFormatError(f"unknown edge_text {ref}")
            if src == dst and not allow_self_loops:
                raise DataFormatError(f"self-loop on node {src} (row {n}); pass allow_self_loops")
            if ts < 0 or not math.isfinite(ts):
                raise DataFormatError(f"invalid timestamp {ts} (row {n})")
        order = sorted(range(len(rows)), key=lambda k: (rows[k][3], k))
        log_ = tuple(
            Interaction(i, rows[k][0], rows[k][1], rows[k][2], float(rows[k][3]))
            for i, k in enumerate(order)
        )
        srcs = {i.src for i in log_}
        dsts = {i.dst for i in log_}
        t_range = (log_[0].timestamp, log_[-1].timestamp) if log_ else (0.0, 0.0)
        return cls(
            node_texts=dict(node_texts),
            edge_texts=dict(edge_texts),
            log=log_,
            is_bipartite=bool(log_) and srcs.isdisjoint(dsts),
            time_range=t_range,
            allow_self_loops=allow_self_loops,
        )

    @property
    def nodes(self) -> list[int]:
        return sorted(self.node_texts)

    @cached_property
    def destinations(self) -> np.ndarray:
        return np.unique(np.array([i.dst for i in self.log], dtype=np.int64))

    @cached_property
    def timestamps(self) -> np.ndarray:
        return np.array([i.timestamp for i in self.log], dtype=np.float64)

    @cached_property
    def _incident(self) -> dict[int, list[tuple[Interaction, str]]]:
        inc: dict[int, list[tuple[Interaction, str]]] = {v: [] for v in self.node_texts}
        for it in self.log:
            inc[it.src].append((it, AS_SOURCE))
            if it.dst != it.src:
                inc[it.dst].append((it, AS_DESTINATION))
        return inc

    def counterpart(self, it: Interaction, node: int) -> int:
        return it.dst if it.src == node else it.src

    def edge_text(self, it: Interaction) -> str:
        return self.edge_texts[it.edge_text_ref]


def _read_csv(path: Path, header: Sequence[str]) -> list[tuple[int, list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, expected header {','.join(header)}")
        if [h.strip() for h in head] != list(header):
            raise DataFormatError(f"{path}:1: expected header {','.join(header)}, got {','.join(head)}")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}"
                )
            rows.append((reader.line_num, row))
    return rows


def _parse_id(path: Path, line: int, value: str) -> int:
    try:
        out = int(value)
    except ValueError:
        raise DataFormatError(f"{path}:{line}: malformed id {value!r}") from None
    if out < 0:
        raise DataFormatError(f"{path}:{line}: negative id {out}")
    return out


def load_dytag(
    edges_path: str | Path,
    node_text_path: str | Path,
    edge_text_path: str | Path,
    allow_self_loops: bool = False,
) -> DyTAG:
    edges_path, node_text_path, edge_text_path = map(Path, (edges_path, node_text_path, edge_text_path))
    node_texts = {
        _parse_id(node_text_path, ln, r[0]): r[1]
        for ln, r in _read_csv(node_text_path, ("node_id", "text"))
    }
    edge_texts = {
        _parse_id(edge_text_path, ln, r[0]): r[1]
        for ln, r in _read_csv(edge_text_path, ("text_id", "text"))
    }
    rows = []
    for ln, r in _read_csv(edges_path, ("src", "dst", "edge_text_id", "timestamp")):
        src, dst, ref = (_parse_id(edges_path, ln, x) for x in r[:3])
        try:
            ts = float(r[3])
        except ValueError:
            raise DataFormatError(f"{edges_path}:{ln}: malformed timestamp {r[3]!r}") from None
        if src not in node_texts:
            raise DataFormatError(f"{edges_path}:{ln}: unknown node {src}")
        if dst not in node_texts:
            raise DataFormatError(f"{edges_path}:{ln}: unknown node {dst}")
        if ref not in edge_texts:
            raise DataFormatError(f"{edges_path}:{ln}: unknown edge_text {ref}")
        if ts < 0 or not math.isfinite(ts):
            raise DataFormatError(f"{edges_path}:{ln}: invalid timestamp {r[3]!r}")
        if src == dst and not allow_self_loops:
            raise DataFormatError(f"{edges_path}:{ln}: self-loop on node {src}")
        rows.append((src, dst, ref, ts))
    return DyTAG.from_records(node_texts, edge_texts, rows, allow_self_loops=allow_self_loops)


def load_dataset_dir(directory: str | Path, allow_self_loops: bool = False) -> DyTAG:
    d = Path(directory)
    return load_dytag(d / "edges.csv", d / "node_text.csv", d / "edge_text.csv", allow_self_loops)


def write_dytag(g: DyTAG, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "node_text.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "text"])
        for v in sorted(g.node_texts):
            w.writerow([v, g.node_texts[v]])
    with open(d / "edge_text.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["text_id", "text"])
        for k in sorted(g.edge_texts):
            w.writerow([k, g.edge_texts[k]])
    with open(d / "edges.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "edge_text_id", "timestamp"])
        for it in g.log:
            w.writerow([it.src, it.dst, it.edge_text_ref, repr(it.timestamp)])


def neighbor_sequence(g: DyTAG, v: int, before: float | None = None) -> NeighborSequence:
    if v not in g.node_texts:
        raise KeyError(f"unknown node {v}")
    items = g._incident[v]
    if before is not None:
        # items are chronological; keep the strict prefix
        lo, hi = 0, len(items)
        while lo < hi:
            mid = (lo + hi) // 2
            if items[mid][0].timestamp < before:
                lo = mid + 1
            else:
                hi = mid
        items = items[:lo]
    return NeighborSequence(v, tuple(items))


def _floor_share(ratio: float, n: int) -> int:
    return math.floor(Fraction(str(ratio)) * n)


def temporal_split(g: DyTAG, ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> Split:
    if abs(sum(Fraction(str(r)) for r in ratios) - 1) > Fraction(1, 10**9):
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n = len(g.log)
    if n == 0:
        raise ValueError("cannot split an empty log")
    ts = g.timestamps

    def push_past_ties(k: int) -> int:
        while 0 < k < n and ts[k] == ts[k - 1]:
            k += 1
        return k

    train_end = push_past_ties(_floor_share(ratios[0], n))
    val_end = push_past_ties(max(train_end, _floor_share(ratios[0], n) + _floor_share(ratios[1], n)))
    split = Split(
        train=range(0, train_end),
        val=range(train_end, val_end),
        test=range(val_end, n),
        boundary_times=(
            float(ts[train_end - 1]) if train_end else float(ts[0]),
            float(ts[val_end - 1]) if val_end else float(ts[0]),
        ),
    )
    if not (len(split.train) and len(split.val) and len(split.test)):
        log.warning(
            "degenerate split: train=%d val=%d test=%d (timestamp ties at boundaries)",
            len(split.train), len(split.val), len(split.test),
        )
    return split


def inductive_mask(g: DyTAG, split: Split) -> set[int]:
    seen: set[int] = set()
    for k in split.train:
        it = g.log[k]
        seen.add(it.src)
        seen.add(it.dst)
    return {
        g.log[k].id
        for k in split.test
        if g.log[k].src not in seen or g.log[k].dst not in seen
    }
