import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dygrasp.chain import (
    NO_DESCRIPTION, build_chain, embed_chain, partition_segments, render_global_prompt, run_chain, run_global,
)
from dygrasp.dytag import DyTAG, NeighborSequence, neighbor_sequence
from dygrasp.encoder import MockEncoder
from dygrasp.errors import CapabilityError, ExtractionAborted, TransientBackendError
from dygrasp.llm import MockBackend, count_tokens
from dygrasp.store import FeatureStore
from dygrasp.synth import INTEREST_WORDS, OracleBackend, SynthConfig, generate
from dygrasp.templates import PromptTemplate

from conftest import make_graph, random_graph

GLOBAL = PromptTemplate.builtin("synthetic_global")


def seq_with_times(times):
    g = make_graph([(0, k + 1, t) for k, t in enumerate(times)])
    return neighbor_sequence(g, 0)


def test_partition_balanced_sizes_and_boundaries():
    bounds, segs = partition_segments(seq_with_times([float(t) for t in range(1, 11)]), 4)
    assert [len(s) for s in segs] == [3, 3, 2, 2]
    assert bounds == [-1.0, 3.0, 6.0, 8.0, 10.0]


def test_partition_tie_repair():
    bounds, segs = partition_segments(seq_with_times([1.0, 2.0, 2.0, 2.0, 5.0]), 2)
    assert [len(s) for s in segs] == [4, 1]
    assert bounds == [-1.0, 2.0, 5.0]


def test_partition_empty_sequence():
    bounds, segs = partition_segments(NeighborSequence(0, ()), 3)
    assert bounds == [-1.0] * 4 and segs == [[], [], []]


def test_partition_time_mode_equal_width():
    seq = seq_with_times([0.0, 1.0, 2.0, 9.0, 10.0])
    bounds, segs = partition_segments(seq, 2, mode="time", time_range=(0.0, 10.0))
    assert bounds == [-1.0, 5.0, 10.0]
    assert [len(s) for s in segs] == [3, 2]


def test_partition_rejects_bad_args():
    with pytest.raises(ValueError):
        partition_segments(seq_with_times([1.0]), 0)
    with pytest.raises(ValueError):
        partition_segments(seq_with_times([1.0]), 1, mode="weekly")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=0, max_size=60), st.integers(1, 10), st.sampled_from(["count", "time"]))
def test_partition_matches_interval_definition(times, s, mode):
    times = sorted(float(t) for t in times)
    if not times:
        seq = NeighborSequence(0, ())
    else:
        seq = seq_with_times(times)
    bounds, segs = partition_segments(seq, s, mode)
    ids = [it.id for it in seq.interactions]
    assert [i for seg in segs for i in seg] == ids
    assert bounds[0] == -1.0
    assert all(a <= b for a, b in zip(bounds, bounds[1:]))
    ts = dict(zip(ids, seq.timestamps))
    for k, seg in enumerate(segs, start=1):
        assert seg == [i for i in ids if bounds[k - 1] < ts[i] <= bounds[k]]
    if mode == "count" and len(set(times)) == len(times):
        sizes = [len(x) for x in segs]
        assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


def test_empty_segment_carries_description():
    # node 0 is active early only; time segmenting leaves its second window empty
    g = make_graph([(0, 1, 1.0), (0, 2, 2.0), (1, 2, 10.0)])
    chain = build_chain(g, 0, 2, mode="time")
    assert chain.segments[1] == []
    run_chain(g, chain, GLOBAL, MockBackend(16))
    assert chain.descriptions[2] == chain.descriptions[1]
    assert chain.descriptions[0] == "node 0"
    vecs = embed_chain(chain, MockEncoder(32))
    assert np.array_equal(vecs[2], vecs[1])


def test_chain_deterministic_and_nine_vectors(tmp_path):
    g = random_graph(np.random.default_rng(1), 5, 90)
    encoder = MockEncoder(32)
    a = run_chain(g, build_chain(g, 0, 8), GLOBAL, MockBackend(16))
    b = run_chain(g, build_chain(g, 0, 8), GLOBAL, MockBackend(16))
    assert a.descriptions == b.descriptions
    store = FeatureStore(tmp_path, "global", 32)
    assert len(embed_chain(a, encoder, store)) == 9
    assert len(store) == 9


def test_empty_node_text_embeds_to_zero():
    g = DyTAG.from_records({0: "", 1: "b"}, {0: "x"}, [(0, 1, 0, 1.0)])
    chain = run_chain(g, build_chain(g, 0, 1), GLOBAL, MockBackend(16))
    vecs = embed_chain(chain, MockEncoder(16))
    assert not vecs[0].any()
    text, _ = render_global_prompt(GLOBAL, g, 0, chain.descriptions[0], chain.segments[0])
    assert NO_DESCRIPTION in text


def test_oracle_descriptions_track_interest_flip():
    g, trace = generate(SynthConfig(num_users=1, num_items=16, num_edges=40, num_interests=2, num_categories=2,
                                    drift_period=20, ambiguity_rate=0.0, seed=5))
    old, new = trace.interest[0], trace.interest[-1]
    assert old != new and trace.interest[20] == new and trace.interest[19] == old
    chain = run_chain(g, build_chain(g, 0, 4), GLOBAL, OracleBackend(trace, 16))
    assert INTEREST_WORDS[old] in chain.descriptions[2]
    assert INTEREST_WORDS[new] in chain.descriptions[4]
    assert INTEREST_WORDS[new] not in chain.descriptions[2]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_chain_prefix_ignores_later_segments(seed, s):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 4, 60)
    chain = run_chain(g, build_chain(g, 0, s), GLOBAL, MockBackend(16))
    i = int(rng.integers(0, s))
    later = {iid for seg in chain.segments[i:] for iid in seg}
    texts = dict(g.edge_texts)
    rows = []
    for it in g.log:
        ref = it.edge_text_ref
        if it.id in later:
            ref = 50_000 + it.id
            texts[ref] = f"rewritten {rng.integers(10**6)}"
        rows.append((it.src, it.dst, ref, it.timestamp))
    h = DyTAG.from_records(g.node_texts, texts, rows)
    other = run_chain(h, build_chain(h, 0, s), GLOBAL, MockBackend(16))
    assert other.descriptions[: i + 1] == chain.descriptions[: i + 1]


def test_generation_token_accounting():
    g = random_graph(np.random.default_rng(2), 6, 120)
    backend = MockBackend(16, max_generation_tokens=32)
    overhead = count_tokens(GLOBAL.body("", "", ""))
    for v in g.nodes:
        chain = run_chain(g, build_chain(g, v, 4), GLOBAL, backend)
        lines = sum(
            count_tokens(GLOBAL.interaction_line(g.node_texts[v], r, g.node_texts[g.counterpart(it, v)],
                                                 g.edge_text(it), it.timestamp))
            for it, r in neighbor_sequence(g, v).items)
        inter = sum(p[0] for p in chain.prompt_tokens)
        other = sum(p[1] for p in chain.prompt_tokens)
        assert inter == lines
        node_text = count_tokens(g.node_texts[v])
        assert other <= chain.s * (32 + count_tokens(NO_DESCRIPTION) + overhead + node_text)


def test_run_global_resumes_from_persisted_prefix(tmp_path):
    g = random_graph(np.random.default_rng(3), 5, 60)

    class FailLate(MockBackend):
        calls = 0

        def generate(self, prompt_text):
            FailLate.calls += 1
            if FailLate.calls > 6:
                raise TransientBackendError("quota")
            return super().generate(prompt_text)

    d = FeatureStore(tmp_path, "descriptions")
    v = FeatureStore(tmp_path, "global", 16)
    with pytest.raises(ExtractionAborted):
        run_global(g, 3, GLOBAL, FailLate(16), MockEncoder(16), d, v, retries=0)
    d2, v2 = FeatureStore(tmp_path, "descriptions"), FeatureStore(tmp_path, "global", 16)
    assert 0 < d2.durable_count < 5 * 4
    chains = run_global(g, 3, GLOBAL, MockBackend(16), MockEncoder(16), d2, v2)
    fresh = run_global(g, 3, GLOBAL, MockBackend(16), MockEncoder(16))
    assert {n: c.descriptions for n, c in chains.items()} == {n: c.descriptions for n, c in fresh.items()}


def test_generation_capability_required():
    class Mute(MockBackend):
        supports_generation = False

    g = make_graph([(0, 1, 1.0)])
    with pytest.raises(CapabilityError):
        run_chain(g, build_chain(g, 0, 1), GLOBAL, Mute(16))
