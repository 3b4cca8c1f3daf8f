import logging

import numpy as np
import pytest

from conftest import CANNED_COMPLETION
from mara.errors import ContextOverflow, DimensionMismatch, EmptyContent, ProviderUnavailable, ScriptExhausted
from mara.providers import (
    GenerationRequest,
    HeuristicGenerator,
    HttpEmbedder,
    HttpGenerator,
    MockEmbedder,
    ProviderConfig,
    ScriptedGenerator,
    parse_embedder_spec,
)
from mara.sec import render_prompt


def test_mock_embedder_is_deterministic_and_normalised():
    a, b = MockEmbedder(32, 7), MockEmbedder(32, 7)
    v = a.embed("hello")
    assert v.dtype == np.float32 and v.shape == (32,)
    assert np.array_equal(v, b.embed("hello"))
    assert abs(float(np.linalg.norm(v)) - 1) < 1e-6
    assert not np.array_equal(v, MockEmbedder(32, 8).embed("hello"))
    assert np.array_equal(a.embed(b"hello"), v)
    with pytest.raises(EmptyContent):
        a.embed("")


def test_embedder_spec():
    assert parse_embedder_spec("mock:16:3").id == "mock:dim=16:seed=3"


def test_scripted_generator_exhausts():
    gen = ScriptedGenerator(["a"])
    assert gen.generate(GenerationRequest("p")) == "a"
    with pytest.raises(ScriptExhausted):
        gen.generate(GenerationRequest("p"))


def test_heuristic_follows_markers():
    gen = HeuristicGenerator()
    prompt = render_prompt("sufficiency", {"user_question": "q",
                                           "retrieved_passages": "[passage d1] EVIDENCE: x;"})
    assert gen.generate(GenerationRequest(prompt)) == "Partially Sufficient"
    prompt = render_prompt("answer", {"user_question": "q", "retrieved_passages": "[passage d1] ANSWER: 42; tail"})
    assert gen.generate(GenerationRequest(prompt)) == "42"


def config(server, **kw):
    return ProviderConfig(endpoint=server.url, retries=kw.pop("retries", 2), backoff=0.0, **kw)


def test_http_embedder_round_trip(openai_server, monkeypatch):
    monkeypatch.setenv("TEST_KEY", "sekrit")
    emb = HttpEmbedder(config(openai_server, model="e", api_key_env="TEST_KEY"))
    v = emb.embed("some text")
    assert v.shape == (8,) and emb.dim == 8
    req = openai_server.requests[-1]
    assert req["path"] == "/v1/embeddings" and req["body"]["input"] == "some text"
    assert req["headers"]["Authorization"] == "Bearer sekrit"
    emb.embed(b"\x89PNG fake")
    assert openai_server.requests[-1]["body"]["input"].startswith("data:image/png;base64,")


def test_http_embedder_dimension_change(openai_server):
    emb = HttpEmbedder(config(openai_server, model="wrongdim"))
    emb.embed("first")
    with pytest.raises(DimensionMismatch):
        emb.embed("second")


def test_http_generator_returns_canned_completion(openai_server):
    gen = HttpGenerator(config(openai_server, model="g"))
    out = gen.generate(GenerationRequest("hi", max_tokens=7))
    assert out == CANNED_COMPLETION
    body = openai_server.requests[-1]["body"]
    assert body["max_tokens"] == 7 and body["temperature"] == 0.0
    assert body["messages"][0]["content"] == "hi"


def test_truncation_is_logged(openai_server, caplog):
    gen = HttpGenerator(config(openai_server, model="short"))
    with caplog.at_level(logging.WARNING):
        gen.generate(GenerationRequest("hi"))
    assert "truncated" in caplog.text
    assert gen.log.records[-1]["truncated"] is True


def test_retries_then_succeeds(openai_server):
    openai_server.fail_next = 2
    gen = HttpGenerator(config(openai_server, retries=2))
    assert gen.generate(GenerationRequest("hi")) == CANNED_COMPLETION
    assert len(openai_server.requests) == 3


def test_retries_exhausted(openai_server):
    openai_server.fail_next = 5
    gen = HttpGenerator(config(openai_server, retries=1))
    with pytest.raises(ProviderUnavailable):
        gen.generate(GenerationRequest("hi"))
    assert len(openai_server.requests) == 2


def test_context_overflow_is_not_retried(openai_server):
    gen = HttpGenerator(config(openai_server, model="overflow"))
    with pytest.raises(ContextOverflow):
        gen.generate(GenerationRequest("x" * 100))
    assert len(openai_server.requests) == 1


def test_unreachable_endpoint():
    gen = HttpGenerator(ProviderConfig(endpoint="http://127.0.0.1:9", retries=1, backoff=0.0, timeout=1))
    with pytest.raises(ProviderUnavailable):
        gen.generate(GenerationRequest("hi"))


def test_image_attachments_become_parts(openai_server, image_doc):
    gen = HttpGenerator(config(openai_server))
    gen.generate(GenerationRequest("look", attachments=(f"{image_doc}#bbox=0,0,0.5,0.5",)))
    content = openai_server.requests[-1]["body"]["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": "look"}
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
