"""Encoder and generator providers.

Two HTTP clients speak the OpenAI-compatible ``/v1/embeddings`` and
``/v1/chat/completions`` shapes. The offline doubles are:

* :class:`MockEmbedder`: unit-norm vectors seeded from a hash of the content.
* :class:`StaticEmbedder`: returns vectors from a lookup table (tests that need
  exact geometry).
* :class:`ScriptedGenerator`: pops canned responses in order.
* :class:`HeuristicGenerator`: answers the controller prompts by reading
  ``ANSWER:`` / ``EVIDENCE:`` markers out of the passages, so end-to-end runs
  work without a model.
"""
from __future__ import annotations

import base64
import hashlib
import logging
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from mara.errors import (
    ContextOverflow,
    DimensionMismatch,
    EmptyContent,
    InvalidConfig,
    ProviderError,
    ProviderUnavailable,
    ScriptExhausted,
)

log = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 512
DEFAULT_TEMPERATURE = 0.0

ENV_EMBED_ENDPOINT = "MARA_EMBED_ENDPOINT"
ENV_GEN_ENDPOINT = "MARA_GEN_ENDPOINT"
ENV_API_KEY_VAR = "MARA_API_KEY_VAR"


def digest(data) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    elif isinstance(data, np.ndarray):
        data = np.ascontiguousarray(data).tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


def _as_bytes(content) -> bytes:
    if isinstance(content, str):
        return content.encode("utf-8")
    if isinstance(content, (bytes, bytearray, memoryview)):
        return bytes(content)
    raise TypeError(f"cannot embed content of type {type(content).__name__}")


class CallLog:
    """Thread-safe record of provider calls, kept as request/response digests."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[dict] = []

    def add(self, kind, request, response, **extra):
        rec = {"kind": kind, "request_digest": digest(request), "response_digest": digest(response)}
        rec.update(extra)
        with self._lock:
            self._records.append(rec)

    @property
    def records(self) -> list[dict]:
        with self._lock:
            return list(self._records)

    def __len__(self):
        with self._lock:
            return len(self._records)


class Embedder(Protocol):
    id: str
    dim: int

    def embed(self, content) -> np.ndarray: ...


class Generator(Protocol):
    def generate(self, request: "GenerationRequest") -> str: ...


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    attachments: tuple = ()
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.prompt:
            raise EmptyContent("generation prompt must be non-empty")
        if self.temperature < 0:
            raise InvalidConfig("temperature must be >= 0")
        if self.max_tokens < 1:
            raise InvalidConfig("max_tokens must be >= 1")
        object.__setattr__(self, "attachments", tuple(self.attachments))


# -- embedders ---------------------------------------------------------------

class MockEmbedder:
    """Deterministic unit-norm float32 vectors; a pure function of (content, dim, seed)."""

    def __init__(self, dim: int = 64, seed: int = 0, log: CallLog | None = None):
        if dim < 1:
            raise InvalidConfig("dim must be positive")
        self.dim = int(dim)
        self.seed = int(seed)
        self.id = f"mock:dim={self.dim}:seed={self.seed}"
        self.log = log

    def embed(self, content) -> np.ndarray:
        data = _as_bytes(content)
        if not data:
            raise EmptyContent("cannot embed empty content")
        h = hashlib.sha256(self.seed.to_bytes(8, "little", signed=True) + data).digest()
        rng = np.random.default_rng(int.from_bytes(h[:8], "little"))
        v = rng.standard_normal(self.dim)
        v /= np.linalg.norm(v)
        out = v.astype(np.float32)
        if self.log is not None:
            self.log.add("embed", data, out)
        return out


class StaticEmbedder:
    """Lookup-table embedder; unknown content falls through to ``fallback``."""

    def __init__(self, table: Mapping, fallback: Embedder | None = None, id: str = "static"):
        self.table = {(_as_bytes(k)): np.asarray(v, dtype=np.float32) for k, v in table.items()}
        dims = {v.shape[0] for v in self.table.values()}
        if fallback is not None:
            dims.add(fallback.dim)
        if len(dims) > 1:
            raise DimensionMismatch(f"static embedder vectors disagree on dim: {sorted(dims)}")
        self.dim = dims.pop() if dims else 0
        self.fallback = fallback
        self.id = id

    def embed(self, content) -> np.ndarray:
        data = _as_bytes(content)
        if not data:
            raise EmptyContent("cannot embed empty content")
        if data in self.table:
            return self.table[data].copy()
        if self.fallback is None:
            raise ProviderError(f"no static vector for content {digest(data)}")
        return self.fallback.embed(content)


# -- generators --------------------------------------------------------------

class ScriptedGenerator:
    """Test double: every call pops the next scripted response."""

    def __init__(self, script: Iterable[str] = ()):
        self._queue = deque(script)
        self._lock = threading.Lock()
        self.requests: list[GenerationRequest] = []

    def generate(self, request: GenerationRequest) -> str:
        with self._lock:
            self.requests.append(request)
            if not self._queue:
                raise ScriptExhausted()
            return self._queue.popleft()

    @property
    def remaining(self) -> int:
        with self._lock:
            return len(self._queue)


def scripted_generator(script: Sequence[str]) -> ScriptedGenerator:
    return ScriptedGenerator(script)


_WORD_RE = re.compile(r"[a-z0-9]+")
_PASSAGE_RE = re.compile(r"^\[(passage|memory) ([^\]]+)\]\s?(.*)$")


def _section(prompt: str, header: str) -> str:
    start = prompt.find(header)
    if start < 0:
        return ""
    start += len(header)
    end = prompt.find("\n### ", start)
    return prompt[start:] if end < 0 else prompt[start:end]


def _passages(text: str):
    """Yield (tag, doc_id, body) for ``[passage id] body`` lines."""
    for line in text.splitlines():
        m = _PASSAGE_RE.match(line.strip())
        if m:
            yield m.group(1), m.group(2), m.group(3)


def _marker(text: str, marker: str):
    i = text.find(marker)
    if i < 0:
        return None
    rest = text[i + len(marker):]
    return re.split(r"[\n;]", rest, maxsplit=1)[0].strip() or None


class HeuristicGenerator:
    """Rule-based stand-in for a generator model.

    Passages carrying ``ANSWER: x;`` are sufficient, ``EVIDENCE: y;`` partially
    sufficient, anything else insufficient. Answers are the ``ANSWER:`` text
    (up to ``;`` or newline) of the passage sharing most words with the
    question, else the evidence text chosen the same way.
    """

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> str:
        with self._lock:
            self.calls += 1
        p = request.prompt
        if p.startswith("You are a fact-based reasoning assistant."):
            ctx = _section(p, "### Context Provided (Retrieved Passages + Memory Buffer):")
            if "ANSWER:" in ctx:
                return "Sufficient"
            if "EVIDENCE:" in ctx:
                return "Partially Sufficient"
            return "Insufficient"
        if p.startswith("You are managing a retrieval memory buffer"):
            new = _section(p, "### Newly Retrieved Passages:")
            keep = [f"passage {doc_id}" for tag, doc_id, body in _passages(new)
                    if "EVIDENCE:" in body or "ANSWER:" in body]
            return f"- **Keep in Memory:** [{', '.join(keep)}]\n\n- **Remove from Memory:** []"
        if p.startswith("You are a retrieval-augmented reasoning expert."):
            return ("- **Missing Information:** [the value asked for]\n\n"
                    "- **Retrieval Guidance:** [passages stating the answer directly]\n\n"
                    "- **Irrelevant Content:** []")
        if p.startswith("You are grading"):
            pred = _marker(p, "Predicted answer:") or ""
            gold = _marker(p, "Reference answer:") or ""
            from mara.eval import normalize_answer

            return "yes" if normalize_answer(pred) == normalize_answer(gold) else "no"
        for marker in ("ANSWER:", "EVIDENCE:"):
            answer = self._best_marker(p, marker)
            if answer:
                return answer
        return "unknown"

    @staticmethod
    def _best_marker(prompt: str, marker: str):
        """Marker text from the passage sharing most words with the question; first wins ties."""
        question = set(_WORD_RE.findall(_section(prompt, "### User Question:").lower()))
        best, best_overlap = None, -1
        for _, _, body in _passages(prompt):
            value = _marker(body, marker)
            if value is None:
                continue
            overlap = len(question & set(_WORD_RE.findall(body.lower())))
            if overlap > best_overlap:
                best, best_overlap = value, overlap
        return best if best is not None else _marker(prompt, marker)


# -- HTTP --------------------------------------------------------------------

@dataclass
class ProviderConfig:
    endpoint: str
    model: str = "default"
    api_key_env: str | None = None
    timeout: float = 30.0
    max_inflight: int = 4
    retries: int = 2
    backoff: float = 0.5
    dim: int | None = None

    def __post_init__(self):
        if not self.endpoint:
            raise InvalidConfig("endpoint must be set")
        if self.timeout <= 0:
            raise InvalidConfig("timeout must be > 0")
        if self.max_inflight < 1:
            raise InvalidConfig("max_inflight must be >= 1")
        if self.retries < 0:
            raise InvalidConfig("retries must be >= 0")
        self.endpoint = self.endpoint.rstrip("/")

    @classmethod
    def from_env(cls, endpoint_var: str, **overrides) -> "ProviderConfig":
        endpoint = os.environ.get(endpoint_var)
        if not endpoint:
            raise InvalidConfig(f"environment variable {endpoint_var} is not set")
        overrides.setdefault("api_key_env", os.environ.get(ENV_API_KEY_VAR))
        return cls(endpoint=endpoint, **overrides)


def _is_overflow(status: int, body: str) -> bool:
    if status == 413:
        return True
    text = body.lower()
    return status == 400 and ("context_length_exceeded" in text or "context length" in text
                              or "maximum context" in text)


class _HttpClient:
    def __init__(self, config: ProviderConfig, client=None, sleep: Callable[[float], None] = time.sleep):
        import httpx

        self.config = config
        self._httpx = httpx
        self._client = client or httpx.Client(timeout=config.timeout)
        self._slots = threading.BoundedSemaphore(config.max_inflight)
        self._sleep = sleep
        self.log = CallLog()

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            token = os.environ.get(self.config.api_key_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def post(self, path: str, payload: dict) -> dict:
        url = self.config.endpoint + path
        httpx = self._httpx
        last = None
        for attempt in range(self.config.retries + 1):
            if attempt:
                self._sleep(self.config.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._client.post(url, json=payload, headers=self._headers())
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                if _is_overflow(resp.status_code, resp.text):
                    raise ContextOverflow(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
                raise ProviderError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProviderError(f"{url}: response is not JSON") from exc
        raise ProviderUnavailable(f"{url}: gave up after {self.config.retries + 1} attempts ({last})")


class HttpEmbedder:
    def __init__(self, config: ProviderConfig, client=None, **kw):
        self._http = _HttpClient(config, client, **kw)
        self.config = config
        self.id = f"http:{config.endpoint}:{config.model}"
        self._dim = config.dim
        self.log = self._http.log

    @property
    def dim(self):
        return self._dim

    def embed(self, content) -> np.ndarray:
        if isinstance(content, str):
            if not content:
                raise EmptyContent("cannot embed empty content")
            inp = content
        else:
            data = _as_bytes(content)
            if not data:
                raise EmptyContent("cannot embed empty content")
            inp = "data:image/png;base64," + base64.b64encode(data).decode("ascii")
        body = self._http.post("/v1/embeddings", {"model": self.config.model, "input": inp})
        try:
            vec = np.asarray(body["data"][0]["embedding"], dtype=np.float32)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed embeddings response: {exc}") from exc
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise ProviderError("embedding contains non-finite values")
        if self._dim is None:
            self._dim = int(vec.shape[0])
        elif vec.shape[0] != self._dim:
            raise DimensionMismatch(f"expected dim {self._dim}, provider returned {vec.shape[0]}")
        self.log.add("embed", inp, vec)
        return vec


class HttpGenerator:
    def __init__(self, config: ProviderConfig, client=None, **kw):
        self._http = _HttpClient(config, client, **kw)
        self.config = config
        self.log = self._http.log

    def _content(self, request: GenerationRequest):
        if not request.attachments:
            return request.prompt
        from mara.corpus import read_payload

        parts = [{"type": "text", "text": request.prompt}]
        cache: dict = {}
        for att in request.attachments:
            data = read_payload(att, cache) if isinstance(att, str) else bytes(att)
            if isinstance(data, str):
                parts.append({"type": "text", "text": data})
            else:
                url = "data:image/png;base64," + base64.b64encode(data).decode("ascii")
                parts.append({"type": "image_url", "image_url": {"url": url}})
        return parts

    def generate(self, request: GenerationRequest) -> str:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": self._content(request)}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        body = self._http.post("/v1/chat/completions", payload)
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed chat completion response: {exc}") from exc
        if not text:
            raise ProviderError("provider returned an empty completion")
        truncated = choice.get("finish_reason") == "length"
        if truncated:
            log.warning("completion truncated at max_tokens=%d", request.max_tokens)
        self.log.add("generate", request.prompt, text, truncated=truncated)
        return text


# -- profiles ----------------------------------------------------------------

def make_embedder(profile: Mapping) -> Embedder:
    kind = profile.get("kind", "mock")
    if kind == "mock":
        return MockEmbedder(dim=int(profile.get("dim", 64)), seed=int(profile.get("seed", 0)))
    if kind == "http":
        return HttpEmbedder(_http_config(profile, ENV_EMBED_ENDPOINT))
    raise InvalidConfig(f"unknown embedder kind {kind!r}")


def make_generator(profile: Mapping) -> Generator:
    kind = profile.get("kind", "heuristic")
    if kind == "heuristic":
        return HeuristicGenerator()
    if kind == "scripted":
        return ScriptedGenerator(profile.get("script", ()))
    if kind == "http":
        return HttpGenerator(_http_config(profile, ENV_GEN_ENDPOINT))
    raise InvalidConfig(f"unknown generator kind {kind!r}")


def _http_config(profile: Mapping, endpoint_var: str) -> ProviderConfig:
    opts = {k: v for k, v in profile.items() if k not in ("kind", "endpoint")}
    endpoint = profile.get("endpoint") or os.environ.get(endpoint_var)
    if not endpoint:
        raise InvalidConfig(f"http provider needs an endpoint (or {endpoint_var})")
    opts.setdefault("api_key_env", os.environ.get(ENV_API_KEY_VAR))
    return ProviderConfig(endpoint=endpoint, **opts)


def parse_embedder_spec(text: str) -> Embedder:
    """``mock``, ``mock:DIM`` or ``mock:DIM:SEED``, or ``http`` (endpoint from env)."""
    parts = text.split(":")
    if parts[0] == "mock":
        dim = int(parts[1]) if len(parts) > 1 else 64
        seed = int(parts[2]) if len(parts) > 2 else 0
        return MockEmbedder(dim, seed)
    if parts[0] == "http":
        return make_embedder({"kind": "http", **({"model": parts[1]} if len(parts) > 1 else {})})
    raise InvalidConfig(f"unknown embedder profile {text!r}")
