"""Small JSON-over-HTTP front end for retrieve and answer.

Endpoints: ``GET /healthz``, ``POST /v1/retrieve``, ``POST /v1/answer``.
Every response body carries ``config_hash`` so results can be attributed.
"""
from __future__ import annotations

import json
import logging
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from mara.errors import MaraError, ProviderError, SessionAborted
from mara.qre import ABLATIONS

log = logging.getLogger(__name__)


class RequestError(Exception):
    def __init__(self, field, message):
        self.field = field
        super().__init__(message)


def _int_field(body, name, default=None, minimum=1):
    if name not in body or body[name] is None:
        if default is None:
            raise RequestError(name, f"{name} is required")
        return default
    v = body[name]
    if isinstance(v, bool) or not isinstance(v, int):
        raise RequestError(name, f"{name} must be an integer")
    if v < minimum:
        raise RequestError(name, f"{name} must be >= {minimum}")
    return v


def _query_field(body):
    q = body.get("query")
    if not isinstance(q, str) or not q.strip():
        raise RequestError("query", "query must be a non-empty string")
    return q


def parse_retrieve(body) -> dict:
    if not isinstance(body, dict):
        raise RequestError("", "request body must be a JSON object")
    unknown = set(body) - {"query", "k", "ablation", "explain"}
    if unknown:
        raise RequestError(sorted(unknown)[0], "unknown field")
    ablation = body.get("ablation")
    if ablation is not None and ablation not in ABLATIONS:
        raise RequestError("ablation", f"ablation must be one of {ABLATIONS}")
    return {"query": _query_field(body), "k": _int_field(body, "k", 10), "ablation": ablation,
            "explain": bool(body.get("explain", False))}


def parse_answer(body) -> dict:
    if not isinstance(body, dict):
        raise RequestError("", "request body must be a JSON object")
    unknown = set(body) - {"query", "k", "window", "stride", "feedback", "ablation"}
    if unknown:
        raise RequestError(sorted(unknown)[0], "unknown field")
    window = _int_field(body, "window") if body.get("window") is not None else None
    stride = _int_field(body, "stride") if body.get("stride") is not None else None
    feedback = body.get("feedback")
    if feedback is not None and not isinstance(feedback, bool):
        raise RequestError("feedback", "feedback must be a boolean")
    ablation = body.get("ablation")
    if ablation is not None and ablation not in ABLATIONS:
        raise RequestError("ablation", f"ablation must be one of {ABLATIONS}")
    return {"query": _query_field(body), "k": _int_field(body, "k", 10), "window": window,
            "stride": stride, "feedback": feedback, "ablation": ablation}


class MaraService:
    """Owns the engine and the HTTP server; the index may finish loading after startup."""

    def __init__(self, engine_factory, host="127.0.0.1", port=0):
        self._engine_factory = engine_factory
        self.engine = None
        self.ready = threading.Event()
        self.load_error = None
        self.httpd = ThreadingHTTPServer((host, port), self._handler_class())
        self.httpd.daemon_threads = True
        self._threads = []

    @property
    def address(self):
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _load(self):
        try:
            self.engine = self._engine_factory()
        except Exception as exc:  # surfaced through /healthz
            log.exception("engine failed to load")
            self.load_error = f"{type(exc).__name__}: {exc}"
        finally:
            self.ready.set()

    def start(self, background_load=True):
        loader = threading.Thread(target=self._load, daemon=True)
        loader.start()
        if not background_load:
            loader.join()
        server = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        server.start()
        self._threads = [loader, server]
        return self

    def serve_forever(self):
        threading.Thread(target=self._load, daemon=True).start()
        self.httpd.serve_forever()

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()

    # -- request handling ----------------------------------------------------

    def handle(self, method: str, path: str, body) -> tuple[int, dict]:
        engine = self.engine
        config_hash = engine.config.snapshot_hash() if engine is not None else None

        def reply(status, payload):
            payload = dict(payload)
            payload["config_hash"] = config_hash
            return status, payload

        if method == "GET" and path == "/healthz":
            if engine is None:
                status = "error" if self.load_error else "loading"
                return reply(HTTPStatus.SERVICE_UNAVAILABLE, {"status": status, "error": self.load_error})
            return reply(HTTPStatus.OK, {"status": "ok", "index_docs": len(engine.index)})
        if method != "POST" or path not in ("/v1/retrieve", "/v1/answer"):
            return reply(HTTPStatus.NOT_FOUND, {"error": f"no route for {method} {path}"})
        if engine is None:
            return reply(HTTPStatus.SERVICE_UNAVAILABLE, {"error": "index not loaded yet"})
        try:
            if path == "/v1/retrieve":
                req = parse_retrieve(body)
                result = engine.retrieve(req["query"], req["k"], req["ablation"])
                from mara.engine import attention_summary

                docs = []
                for d in result.ranked:
                    row = d.to_dict(req["explain"])
                    row["attention"] = attention_summary(d)
                    docs.append(row)
                return reply(HTTPStatus.OK, {"query": req["query"], "k": req["k"], "results": docs})
            req = parse_answer(body)
            result, outcome = engine.answer(req["query"], req["k"], req["window"], req["stride"],
                                            req["feedback"], req["ablation"])
            payload = outcome.to_dict()
            payload.update({"query": req["query"], "candidates": result.doc_ids})
            return reply(HTTPStatus.OK, payload)
        except RequestError as exc:
            return reply(HTTPStatus.BAD_REQUEST, {"error": str(exc), "field": exc.field})
        except (ProviderError, SessionAborted) as exc:
            return reply(HTTPStatus.BAD_GATEWAY, {"error": f"provider failure: {exc}"})
        except MaraError as exc:
            return reply(HTTPStatus.BAD_REQUEST, {"error": str(exc), "field": None})

    def _handler_class(self):
        service = self

        class Handler(BaseHTTPRequestHandler):
            def _send(self, status, payload):
                data = json.dumps(payload, sort_keys=True).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                self._send(*service.handle("GET", self.path, None))

            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                try:
                    body = json.loads(raw or b"{}")
                except json.JSONDecodeError as exc:
                    self._send(HTTPStatus.BAD_REQUEST, {"error": f"invalid JSON: {exc.msg}", "field": ""})
                    return
                self._send(*service.handle("POST", self.path, body))

            def log_message(self, fmt, *args):
                log.debug("%s - %s", self.address_string(), fmt % args)

        return Handler


def serve(engine_factory, host="127.0.0.1", port=8080, background=False) -> MaraService:
    """Start the service. With ``background=True`` it runs on daemon threads and returns."""
    service = MaraService(engine_factory, host, port)
    if background:
        return service.start()
    service.serve_forever()
    return service
