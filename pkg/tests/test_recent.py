import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dygrasp.dytag import DyTAG, neighbor_sequence
from dygrasp.errors import CapabilityError, ContextOverflowError, ExtractionAborted, TransientBackendError
from dygrasp.llm import MockBackend, TokenizedPrompt, tokenize
from dygrasp.recent import (
    all_batches, batch_ranges, build_batches, extract_recent_features, pool_spans, render_recent_prompt,
    token_report,
)
from dygrasp.store import FeatureStore
from dygrasp.synth import regular_temporal_graph
from dygrasp.templates import EMPTY_EDGE_TEXT, PromptTemplate

from conftest import make_graph, random_graph

RECENT = PromptTemplate.builtin("synthetic_recent")


def chain_graph(n):
    """Node 0 interacts with node k at time k, k = 1..n."""
    return make_graph([(0, k, float(k)) for k in range(1, n + 1)])


def spans(n, c):
    seq = neighbor_sequence(chain_graph(n), 0)
    return [(list(b.positions), list(b.target_positions)) for b in build_batches(seq, c)]


def test_batches_seven_items_window_four():
    assert spans(7, 4) == [([1, 2, 3, 4], [1, 2, 3, 4]), ([3, 4, 5, 6], [5, 6]), ([5, 6, 7], [7])]


def test_batches_short_sequence_single_batch():
    assert spans(3, 8) == [([1, 2, 3], [1, 2, 3])]


def test_batches_eight_items_window_four():
    assert spans(8, 4) == [([1, 2, 3, 4], [1, 2, 3, 4]), ([3, 4, 5, 6], [5, 6]), ([5, 6, 7, 8], [7, 8])]


@pytest.mark.parametrize("c", [0, 3, 5, -2])
def test_odd_or_small_window_rejected(c):
    with pytest.raises(ValueError, match="window length must be even"):
        batch_ranges(5, c)


def test_empty_sequence_has_no_batches():
    assert batch_ranges(0, 4) == []


def test_batch_members_are_interaction_ids_with_roles():
    g = make_graph([(0, 1, 1.0), (2, 0, 2.0), (0, 3, 3.0)])
    (b,) = build_batches(neighbor_sequence(g, 0), 4)
    assert b.members == (0, 1, 2)
    assert b.roles == ("as_source", "as_destination", "as_source")
    assert b.context_size == 0


def test_prompt_spans_ordered_and_cover_rendered_lines():
    g = make_graph([(0, 1, 1.0), (0, 2, 2.0)])
    (b,) = build_batches(neighbor_sequence(g, 0), 4)
    p = render_recent_prompt(b, RECENT, g)
    (s1, a1, z1), (s2, a2, z2) = p.span_index
    assert (s1, s2) == (1, 2)
    assert z1 < a2
    assert "bought from node 1: met" in p.text
    assert p.text.index("node 1") < p.text.index("node 2")


def test_empty_edge_text_placeholder():
    g = make_graph([(0, 1, 0, 1.0)], edge_texts={0: "   "})
    (b,) = build_batches(neighbor_sequence(g, 0), 2)
    assert EMPTY_EDGE_TEXT in render_recent_prompt(b, RECENT, g).text


def test_review_template_keeps_review_verbatim():
    review = "Great tacos, slow service; would come back!"
    g = DyTAG.from_records({0: "Alice", 1: "Taqueria Luna"}, {0: review}, [(0, 1, 0, 1_600_000_000.0)])
    (b,) = build_batches(neighbor_sequence(g, 0), 2)
    tpl = PromptTemplate.builtin("googlemap_recent")
    p = render_recent_prompt(b, tpl, g)
    assert review in p.text
    line = tpl.interaction_line("Alice", "as_source", "Taqueria Luna", review, 1_600_000_000.0)
    assert review in line and "1600000000" in line


def test_context_overflow_names_window():
    g = chain_graph(6)
    b = build_batches(neighbor_sequence(g, 0), 6)[0]
    with pytest.raises(ContextOverflowError, match="smaller window"):
        render_recent_prompt(b, RECENT, g, MockBackend(16, context_limit=10))


def test_pool_is_mean_of_span_rows():
    states = np.array([[1.0, 0.0], [3.0, 2.0], [5.0, 4.0]])
    p = TokenizedPrompt([7, 8, 9], [(1, 0, 0), (2, 1, 2)])
    out = pool_spans(states, p, [1, 2])
    np.testing.assert_array_equal(out[1], [1.0, 0.0])
    np.testing.assert_array_equal(out[2], [4.0, 3.0])


def test_extract_features_match_manual_pooling():
    g = chain_graph(5)
    b = MockBackend(16)
    feats = extract_recent_features(all_batches(g, 4, nodes=[0]), b, g, RECENT)
    assert [f.interaction for f in feats] == [0, 1, 2, 3, 4]
    batch = build_batches(neighbor_sequence(g, 0), 4)[1]
    p = render_recent_prompt(batch, RECENT, g)
    first, last = p.span(5)
    np.testing.assert_allclose(feats[4].vector, b.hidden_states(p)[first : last + 1].mean(0))


def test_one_feature_per_endpoint(tmp_path):
    g = make_graph([(0, 1, 1.0), (1, 2, 2.0)])
    store = FeatureStore(tmp_path, "recent", 16)
    extract_recent_features(all_batches(g, 2), MockBackend(16), g, RECENT, store)
    assert store.keys() == [(0, 0), (1, 0), (1, 1), (2, 1)]
    assert not np.array_equal(store.get((0, 0)), store.get((1, 0)))


def test_rerun_gives_identical_store_bytes(tmp_path):
    g = random_graph(np.random.default_rng(0), 10, 80)
    for name, workers in (("a", 1), ("b", 3)):
        store = FeatureStore(tmp_path / name, "recent", 16, {"x": 1})
        extract_recent_features(all_batches(g, 4), MockBackend(16), g, RECENT, store, workers=workers)
        store.compact()
    for suffix in ("recent.bin", "recent.idx.json"):
        assert (tmp_path / "a" / suffix).read_bytes() == (tmp_path / "b" / suffix).read_bytes()


def test_resume_skips_finished_batches(tmp_path):
    g = chain_graph(9)
    store = FeatureStore(tmp_path, "recent", 16)
    extract_recent_features(all_batches(g, 4), MockBackend(16), g, RECENT, store)

    class Counting(MockBackend):
        calls = 0

        def hidden_states(self, prompt):
            Counting.calls += 1
            return super().hidden_states(prompt)

    again = extract_recent_features(all_batches(g, 4), Counting(16), g, RECENT, store)
    assert Counting.calls == 0 and len(again) == 18


def test_failing_batches_abort_with_pending_list(tmp_path):
    g = chain_graph(7)

    class Flaky(MockBackend):
        def hidden_states(self, prompt):
            if len(prompt.span_index) < 4:
                raise TransientBackendError("down")
            return super().hidden_states(prompt)

    store = FeatureStore(tmp_path, "recent", 16)
    with pytest.raises(ExtractionAborted) as info:
        extract_recent_features(all_batches(g, 4, nodes=[0]), Flaky(16), g, RECENT, store, retries=1)
    assert info.value.pending == [(0, 2)]
    reopened = FeatureStore(tmp_path, "recent", 16)
    assert reopened.durable_count == 6


def test_backend_without_hidden_states_refused():
    class NoStates(MockBackend):
        supports_hidden_states = False

    g = chain_graph(2)
    with pytest.raises(CapabilityError):
        extract_recent_features(all_batches(g, 2), NoStates(16), g, RECENT)


def perturb_after(g: DyTAG, k: int, rng) -> DyTAG:
    """Same interactions up to id k; later ones get new endpoints and texts."""
    nodes = g.nodes
    rows, texts = [], dict(g.edge_texts)
    for it in g.log:
        if it.id <= k:
            rows.append((it.src, it.dst, it.edge_text_ref, it.timestamp))
        else:
            a, b = rng.choice(nodes, size=2, replace=False)
            ref = 10_000 + it.id
            texts[ref] = f"changed {rng.integers(1000)}"
            rows.append((int(a), int(b), ref, it.timestamp))
    return DyTAG.from_records(g.node_texts, texts, rows)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8]))
def test_features_ignore_later_interactions(seed, c):
    rng = np.random.default_rng(seed)
    n_edges = int(rng.integers(5, 60))
    rows = [(*rng.choice(6, size=2, replace=False).tolist(), e, float(e + 1)) for e in range(n_edges)]
    g = DyTAG.from_records({v: f"n{v}" for v in range(6)}, {e: f"t{e}" for e in range(n_edges)}, rows)
    k = int(rng.integers(0, n_edges))
    h = perturb_after(g, k, rng)
    b = MockBackend(16)
    fa = {(f.node, f.interaction): f.vector for f in extract_recent_features(all_batches(g, c), b, g, RECENT)}
    fb = {(f.node, f.interaction): f.vector for f in extract_recent_features(all_batches(h, c), b, h, RECENT)}
    for key, vec in fa.items():
        if key[1] <= k:
            assert np.array_equal(vec, fb[key])


def test_edge_centric_regular_graph_is_d_squared_per_node():
    # one token per interaction line and no header/footer
    tpl = PromptTemplate.parse("[interaction]\n{edge_text}\n")
    g = regular_temporal_graph(10, 3, seed=1)
    rep = token_report(g, 4, tpl, mode="edge-centric")
    assert rep["interaction_tokens"] == 9 * 10
    assert rep["overhead_tokens"] == 0
    assert rep["per_node_histogram"] == {"<=16": 10}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 500), st.sampled_from([2, 4, 8, 16]))
def test_node_centric_token_bound(seed, n_edges, c):
    g = random_graph(np.random.default_rng(seed), 15, n_edges)
    rep = token_report(g, c, RECENT, mode="node_centric")
    assert rep["interaction_tokens"] <= 2 * rep["base_interaction_tokens"]
    header = max(len(RECENT.header(t).split()) for t in g.node_texts.values()) + 10
    assert rep["overhead_tokens"] <= rep["num_prompts"] * header
    per_interaction = {}
    for v in g.nodes:
        for it, role in neighbor_sequence(g, v).items:
            line = RECENT.interaction_line(g.node_texts[v], role, g.node_texts[g.counterpart(it, v)],
                                           g.edge_text(it), it.timestamp)
            per_interaction[it.id] = max(per_interaction.get(it.id, 0), len(tokenize(line)))
    assert rep["interaction_tokens"] <= 4 * sum(per_interaction.values())
    assert rep["total_tokens"] == rep["interaction_tokens"] + rep["overhead_tokens"]


def test_token_report_rejects_unknown_mode():
    with pytest.raises(ValueError):
        token_report(chain_graph(2), 2, RECENT, mode="other")
