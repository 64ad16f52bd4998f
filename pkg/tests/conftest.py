import numpy as np
import pytest

from dygrasp.dytag import DyTAG
from dygrasp.synth import SynthConfig, generate


def make_graph(rows, n_nodes=None, texts=None, edge_texts=None):
    """rows: (src, dst, timestamp) or (src, dst, edge_text_id, timestamp)."""
    rows = [r if len(r) == 4 else (r[0], r[1], 0, r[2]) for r in rows]
    nodes = n_nodes if n_nodes is not None else max(max(r[0], r[1]) for r in rows) + 1
    texts = texts or {v: f"node {v}" for v in range(nodes)}
    edge_texts = edge_texts or {0: "met"}
    return DyTAG.from_records(texts, edge_texts, rows)


def random_graph(rng: np.random.Generator, n_nodes: int, n_edges: int, n_times: int | None = None):
    """Non-bipartite random temporal graph with repeated timestamps and distinct edge texts."""
    rows = []
    n_times = n_times or n_edges
    for e in range(n_edges):
        a, b = rng.choice(n_nodes, size=2, replace=False)
        rows.append((int(a), int(b), e, float(rng.integers(1, n_times + 1))))
    texts = {v: f"node {v} likes topic {v % 5}" for v in range(n_nodes)}
    edge_texts = {e: f"message {e} about thing {e % 7}" for e in range(n_edges)}
    return DyTAG.from_records(texts, edge_texts, rows)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(num_users=12, num_items=32, num_edges=600, num_categories=4,
                                drift_period=10, ambiguity_rate=0.5, seed=3))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
