import json
import logging

import httpx
import numpy as np
import pytest

from dygrasp.errors import BackendError, CapabilityError, ContextOverflowError, TransientBackendError
from dygrasp.llm import (
    BackendConfig, MockBackend, RemoteBackend, TokenizedPrompt, count_tokens, dispatch, encode_text,
    make_backend, tokenize,
)


def prompt_of(tokens):
    return TokenizedPrompt(list(tokens), [])


def test_count_tokens_examples():
    assert count_tokens("") == 0
    assert count_tokens("a b c") == 3
    assert count_tokens("visit bookstore, buy notebook") == 5
    assert tokenize("visit bookstore, buy notebook") == ["visit", "bookstore", ",", "buy", "notebook"]


def test_mock_hidden_states_deterministic_and_unit_norm():
    b = MockBackend(16, seed=3)
    p = prompt_of(encode_text("one two three four five"))
    a1, a2 = b.hidden_states(p), b.hidden_states(p)
    assert a1.shape == (5, 16)
    assert a1.tobytes() == a2.tobytes()
    np.testing.assert_allclose(np.linalg.norm(a1, axis=1), 1.0, atol=1e-6)


def test_mock_seed_changes_states():
    p = prompt_of(range(1, 6))
    assert not np.array_equal(MockBackend(16, 0).hidden_states(p), MockBackend(16, 1).hidden_states(p))


def test_mock_causal_at_token_10():
    b = MockBackend(32)
    toks = list(range(100, 120))
    other = list(toks)
    other[10] = 999
    h1, h2 = b.hidden_states(prompt_of(toks)), b.hidden_states(prompt_of(other))
    assert np.array_equal(h1[:10], h2[:10])
    assert not np.array_equal(h1[10], h2[10])


def test_mock_empty_prompt_and_context_limit():
    b = MockBackend(8, context_limit=4)
    assert b.hidden_states(prompt_of([])).shape == (0, 8)
    with pytest.raises(ContextOverflowError) as info:
        b.hidden_states(prompt_of(range(5)))
    assert info.value.limit == 4


def test_mock_generate_frequency_rule():
    b = MockBackend(16)
    text = "coffee " * 5 + "tea and more"
    out = b.generate(text)
    assert out == b.generate(text)
    assert "coffee" in out
    assert out.startswith("SUMMARY[")


def test_generation_capped():
    b = MockBackend(16, max_generation_tokens=4)
    assert count_tokens(b.generate("alpha beta gamma delta epsilon zeta eta theta")) <= 4


def test_prompt_span_validation():
    with pytest.raises(ValueError):
        TokenizedPrompt([1, 2, 3], [(0, 0, 1), (1, 1, 2)])
    with pytest.raises(ValueError):
        TokenizedPrompt([1, 2, 3], [(0, 0, 3)])
    with pytest.raises(ValueError):
        TokenizedPrompt([1, 2, 3], [(0, 0, 0), (0, 1, 1)])


def test_backend_config_validation():
    with pytest.raises(ValueError):
        BackendConfig(d_llm=4)
    with pytest.raises(ValueError):
        BackendConfig(kind="magic")
    with pytest.raises(ValueError):
        make_backend(BackendConfig(kind="remote"))


def test_dispatch_keeps_order_across_pool_sizes():
    b = MockBackend(16)
    prompts = [prompt_of(range(i, i + 7)) for i in range(20)]
    serial = dispatch(b.hidden_states, prompts, 1)
    pooled = dispatch(b.hidden_states, prompts, 4)
    assert all(np.array_equal(x, y) for x, y in zip(serial, pooled))


class Server:
    """Scripted inference server for httpx.MockTransport."""

    def __init__(self, statuses, d=8):
        self.statuses = list(statuses)
        self.d = d
        self.requests = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        self.requests.append((request.url.path, body, request.headers.get("authorization")))
        status = self.statuses.pop(0) if self.statuses else 200
        if status != 200:
            return httpx.Response(status, text="busy")
        if request.url.path == "/v1/hidden_states":
            n = len(body["tokens"])
            return httpx.Response(200, json={"vectors": [[float(i)] * self.d for i in range(n)]})
        return httpx.Response(200, json={"text": "a summary", "usage": {"prompt_tokens": 42, "completion_tokens": 2}})


def remote(server, **kw):
    return RemoteBackend("http://llm.local", 8, backoff=0.0, transport=httpx.MockTransport(server), **kw)


def test_remote_retries_then_succeeds(caplog):
    server = Server([500, 500, 200])
    b = remote(server, retries=3)
    with caplog.at_level(logging.WARNING):
        assert b.generate("hello there") == "a summary"
    assert len(b.retry_events) == 2
    assert sum("retrying" in r.getMessage() for r in caplog.records) == 2
    assert server.requests[-1][1] == {"prompt": "hello there", "max_tokens": 192}


def test_remote_gives_up_with_typed_error():
    b = remote(Server([503] * 10), retries=2)
    with pytest.raises(TransientBackendError):
        b.generate("x")
    assert len(b.retry_events) == 2


def test_remote_client_error_not_retried():
    b = remote(Server([400]), retries=3)
    with pytest.raises(BackendError, match="HTTP 400"):
        b.generate("x")
    assert b.retry_events == []


def test_remote_missing_endpoint_is_capability_error():
    b = remote(Server([404]))
    with pytest.raises(CapabilityError):
        b.hidden_states(prompt_of([1, 2]))


def test_remote_hidden_states_wire_format_and_shape_check(monkeypatch):
    monkeypatch.setenv("DYGRASP_API_KEY", "secret")
    server = Server([])
    b = remote(server)
    out = b.hidden_states(prompt_of([5, 6, 7]))
    assert out.shape == (3, 8)
    path, body, auth = server.requests[0]
    assert path == "/v1/hidden_states" and body == {"tokens": [5, 6, 7], "layer": "last"}
    assert auth == "Bearer secret"
    wrong = remote(Server([], d=4))
    with pytest.raises(BackendError, match="shape"):
        wrong.hidden_states(prompt_of([1]))


def test_remote_without_hidden_states_refuses():
    b = remote(Server([]), hidden_states=False)
    with pytest.raises(CapabilityError):
        b.hidden_states(prompt_of([1]))


def test_remote_token_count_uses_reported_usage():
    b = remote(Server([]))
    est = b.count_tokens_detailed("some prompt text")
    assert est.estimated and est.n == 3
    b.generate("some prompt text")
    exact = b.count_tokens_detailed("some prompt text")
    assert not exact.estimated and exact.n == 42


def test_remote_transport_failure_is_retryable():
    def boom(request):
        raise httpx.ConnectError("refused")

    b = RemoteBackend("http://llm.local", 8, backoff=0.0, retries=1, transport=httpx.MockTransport(boom))
    with pytest.raises(TransientBackendError):
        b.generate("x")
