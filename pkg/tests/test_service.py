import json
import threading

import httpx
import pytest

from mara.config import EngineConfig
from mara.engine import Engine
from mara.errors import ProviderUnavailable
from mara.providers import MockEmbedder
from mara.service import MaraService
from mara.synthetic import random_index

import numpy as np


def engine():
    index = random_index(np.random.default_rng(0), 8, 64)
    return Engine(EngineConfig(), index, embedder=MockEmbedder(64, 0))


@pytest.fixture
def service():
    svc = MaraService(engine).start(background_load=False)
    yield svc
    svc.stop()


def test_healthz(service):
    r = httpx.get(service.address + "/healthz")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok" and body["index_docs"] == 8 and len(body["config_hash"]) == 16


def test_retrieve(service):
    r = httpx.post(service.address + "/v1/retrieve", json={"query": "revenue in 2019", "k": 3, "explain": True})
    assert r.status_code == 200
    body = r.json()
    assert len(body["results"]) == 3
    top = body["results"][0]
    assert len(top["coarse_attention"]) == 4 and len(top["fine_attention"]) == 16
    assert top["attention"]["gates"] == {"g_c": 0.2, "g_f": 0.2}


@pytest.mark.parametrize("payload, field", [({"query": "x", "k": 0}, "k"), ({"k": 3}, "query"),
                                            ({"query": "x", "ablation": "none"}, "ablation"),
                                            ({"query": "x", "top": 3}, "top")])
def test_bad_requests_name_the_field(service, payload, field):
    r = httpx.post(service.address + "/v1/retrieve", json=payload)
    assert r.status_code == 400 and r.json()["field"] == field


def test_invalid_json_and_unknown_route(service):
    r = httpx.post(service.address + "/v1/retrieve", content=b"{oops", headers={"Content-Type": "application/json"})
    assert r.status_code == 400
    assert httpx.get(service.address + "/nope").status_code == 404


def test_answer_abstains_without_passages(service):
    r = httpx.post(service.address + "/v1/answer", json={"query": "x", "k": 4, "window": 2})
    assert r.status_code == 200
    body = r.json()
    assert body["result"] == "abstain" and body["sufficiency_calls"] == 2 and len(body["candidates"]) == 4


def test_provider_failure_maps_to_502():
    class Down:
        def generate(self, request):
            raise ProviderUnavailable("down")

    def factory():
        e = engine()
        e.generator = lambda: Down()
        return e

    svc = MaraService(factory).start(background_load=False)
    try:
        r = httpx.post(svc.address + "/v1/answer", json={"query": "x"})
        assert r.status_code == 502 and "config_hash" in r.json()
    finally:
        svc.stop()


def test_not_ready_while_loading():
    gate = threading.Event()

    def slow():
        gate.wait(5)
        return engine()

    svc = MaraService(slow).start()
    try:
        assert httpx.get(svc.address + "/healthz").status_code == 503
        assert httpx.post(svc.address + "/v1/retrieve", json={"query": "x"}).status_code == 503
        gate.set()
        svc.ready.wait(5)
        assert httpx.get(svc.address + "/healthz").status_code == 200
    finally:
        svc.stop()
