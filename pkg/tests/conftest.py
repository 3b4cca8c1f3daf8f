import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from PIL import Image

CANNED_COMPLETION = "canned completion from the fixture"


class FakeOpenAI:
    """Minimal OpenAI-compatible server. Behaviour is keyed on the request's model name."""

    def __init__(self, dim=8):
        self.dim = dim
        self.requests = []
        self.fail_next = 0
        self.lock = threading.Lock()
        fake = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, status, payload):
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with fake.lock:
                    fake.requests.append({"path": self.path, "body": body, "headers": dict(self.headers)})
                    failing = fake.fail_next > 0
                    if failing:
                        fake.fail_next -= 1
                if failing:
                    return self._reply(503, {"error": "temporarily unavailable"})
                model = body.get("model", "")
                if model == "overflow":
                    return self._reply(400, {"error": {"code": "context_length_exceeded",
                                                       "message": "maximum context length exceeded"}})
                if self.path == "/v1/embeddings":
                    dim = fake.dim + 1 if model == "wrongdim" and len(fake.requests) > 1 else fake.dim
                    seed = int.from_bytes(hashlib.sha256(body["input"].encode()).digest()[:8], "little")
                    vec = np.random.default_rng(seed).standard_normal(dim).tolist()
                    return self._reply(200, {"object": "list", "model": model,
                                             "data": [{"object": "embedding", "index": 0, "embedding": vec}]})
                if self.path == "/v1/chat/completions":
                    finish = "length" if model == "short" else "stop"
                    return self._reply(200, {
                        "id": "chatcmpl-test", "object": "chat.completion", "model": model,
                        "choices": [{"index": 0, "finish_reason": finish,
                                     "message": {"role": "assistant", "content": CANNED_COMPLETION}}],
                    })
                self._reply(404, {"error": "not found"})

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"


@pytest.fixture
def openai_server():
    server = FakeOpenAI()
    server.thread.start()
    yield server
    server.httpd.shutdown()
    server.httpd.server_close()


@pytest.fixture
def text_docs(tmp_path):
    """Three small text documents and a manifest listing them."""
    docs = tmp_path / "docs"
    docs.mkdir()
    lines = []
    for i in range(3):
        (docs / f"t{i}.txt").write_text(f"document {i} " + "lorem ipsum dolor sit amet " * (i + 3), encoding="utf-8")
        lines.append(json.dumps({"id": f"t{i}", "source_uri": f"docs/t{i}.txt", "payload_kind": "text"}))
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


@pytest.fixture
def image_doc(tmp_path):
    path = tmp_path / "page.png"
    arr = (np.arange(64 * 48 * 3) % 251).astype(np.uint8).reshape(48, 64, 3)
    Image.fromarray(arr).save(path)
    return path


# -- acceptance summary ------------------------------------------------------

ACCEPTANCE_RESULTS = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    ok = call.excinfo is None
    prev = ACCEPTANCE_RESULTS.get(number, (title, True))
    ACCEPTANCE_RESULTS[number] = (title, prev[1] and ok)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, ok = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
