"""Query-aligned region attention, gated fusion and cosine top-k retrieval.

For every document the query attends separately over its coarse vectors and
over all of its fine vectors (flattened), each with its own temperature. The
two attended features and the global vector are mixed with gates
``g_c``/``g_f``::

    fused = g_c * coarse_att + g_f * fine_att + (1 - g_c - g_f) * global

and documents are ranked by cosine(query, fused), ties broken by doc id.
All arithmetic is float64.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from mara.errors import (
    DimensionMismatch,
    EmptyIndex,
    InvalidConfig,
    InvalidInput,
    NoGateModel,
    NonPositiveTemperature,
    ZeroVector,
)
from mara.index import EmbeddingIndex, HierarchicalEmbeddings, scan

ABLATIONS = ("full", "no_fine", "no_coarse", "global_only")
DEFAULT_INV_TAU = 20.0

# dataset -> (g_c, 1/tau_c, g_f, 1/tau_f)
PRESETS = {
    "arxivqa": (0.2, 20, 0.1, 20),
    "chartqa": (0.1, 15, 0.2, 20),
    "docvqa": (0.2, 30, 0.2, 20),
    "infovqa": (0.2, 40, 0.2, 50),
    "plotqa": (0.1, 10, 0.1, 10),
    "slidevqa": (0.2, 30, 0.2, 30),
}


@dataclass(frozen=True)
class FusionConfig:
    g_c: float = 0.2
    g_f: float = 0.2
    tau_c: float = 1.0 / DEFAULT_INV_TAU
    tau_f: float = 1.0 / DEFAULT_INV_TAU
    ablation: str = "full"

    def __post_init__(self):
        for name in ("g_c", "g_f"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidConfig(f"{name} must lie in [0, 1], got {v}")
        if self.g_c + self.g_f > 1.0 + 1e-12:
            raise InvalidConfig(f"gate sum g_c + g_f = {self.g_c + self.g_f} exceeds 1")
        for name in ("tau_c", "tau_f"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise NonPositiveTemperature(f"{name} must be a positive finite number, got {v}")
        if self.ablation not in ABLATIONS:
            raise InvalidConfig(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @classmethod
    def preset(cls, name: str, ablation: str = "full") -> "FusionConfig":
        try:
            g_c, inv_c, g_f, inv_f = PRESETS[name.lower()]
        except KeyError:
            raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(g_c=g_c, g_f=g_f, tau_c=1.0 / inv_c, tau_f=1.0 / inv_f, ablation=ablation)

    @classmethod
    def from_inverse(cls, g_c, inv_tau_c, g_f, inv_tau_f, ablation="full") -> "FusionConfig":
        if inv_tau_c <= 0 or inv_tau_f <= 0:
            raise NonPositiveTemperature("inverse temperatures must be positive")
        return cls(g_c=g_c, g_f=g_f, tau_c=1.0 / inv_tau_c, tau_f=1.0 / inv_tau_f, ablation=ablation)

    @property
    def inv_tau_c(self) -> float:
        return 1.0 / self.tau_c

    @property
    def inv_tau_f(self) -> float:
        return 1.0 / self.tau_f

    def effective_gates(self) -> tuple[float, float]:
        g_c = 0.0 if self.ablation in ("no_coarse", "global_only") else self.g_c
        g_f = 0.0 if self.ablation in ("no_fine", "global_only") else self.g_f
        return g_c, g_f

    def with_ablation(self, ablation: str) -> "FusionConfig":
        return replace(self, ablation=ablation)

    def to_dict(self) -> dict:
        return {"g_c": self.g_c, "g_f": self.g_f, "inv_tau_c": self.inv_tau_c,
                "inv_tau_f": self.inv_tau_f, "ablation": self.ablation}


@dataclass(frozen=True)
class AttentionResult:
    weights: np.ndarray
    attended: np.ndarray


@dataclass(frozen=True)
class FusionResult:
    fused: np.ndarray
    coarse_attention: np.ndarray
    fine_attention: np.ndarray
    gates: tuple[float, float]


@dataclass(frozen=True)
class ScoredDocument:
    doc_id: str
    score: float
    coarse_attention: np.ndarray
    fine_attention: np.ndarray
    gates_used: tuple[float, float]
    fused: np.ndarray = field(repr=False)

    def to_dict(self, explain: bool = False) -> dict:
        d = {"doc_id": self.doc_id, "score": self.score}
        if explain:
            d["gates"] = {"g_c": self.gates_used[0], "g_f": self.gates_used[1]}
            d["coarse_attention"] = [float(a) for a in self.coarse_attention]
            d["fine_attention"] = [float(a) for a in self.fine_attention]
        return d


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    ranked: tuple[ScoredDocument, ...]
    k: int
    query_id: str | None = None
    config: FusionConfig | None = None

    @property
    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.ranked]

    def to_dict(self, explain: bool = False) -> dict:
        return {
            "query_id": self.query_id,
            "query": self.query,
            "k": self.k,
            "config": self.config.to_dict() if self.config else None,
            "results": [d.to_dict(explain) for d in self.ranked],
        }


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def softmax(logits) -> np.ndarray:
    z = _vec(logits)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def region_attention(query_vec, region_vecs, tau: float) -> AttentionResult:
    q = _vec(query_vec)
    regions = _vec(region_vecs)
    if regions.ndim == 1:
        regions = regions[None, :]
    if regions.shape[0] == 0:
        raise InvalidInput("region_attention needs at least one region")
    if regions.ndim != 2 or regions.shape[1] != q.shape[0]:
        raise DimensionMismatch(f"query dim {q.shape[0]} vs region block {regions.shape}")
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    weights = softmax(regions @ q / tau)
    return AttentionResult(weights, weights @ regions)


def fuse(query_vec, hier: HierarchicalEmbeddings, config: FusionConfig,
         gates: tuple[float, float] | None = None) -> FusionResult:
    """Fuse one document's hierarchy against the query.

    ``gates`` overrides the configured gates (used by the learned-gate hook);
    the ablation still zeroes the disabled levels.
    """
    q = _vec(query_vec)
    if q.shape[0] != hier.dim:
        raise DimensionMismatch(f"query dim {q.shape[0]} vs index dim {hier.dim}")
    coarse = region_attention(q, hier.coarse, config.tau_c)
    fine = region_attention(q, hier.fine.reshape(-1, hier.dim), config.tau_f)
    g_c, g_f = config.effective_gates() if gates is None else gates
    if gates is not None:
        if config.ablation in ("no_coarse", "global_only"):
            g_c = 0.0
        if config.ablation in ("no_fine", "global_only"):
            g_f = 0.0
    fused = g_c * coarse.attended + g_f * fine.attended + (1.0 - g_c - g_f) * _vec(hier.global_vec)
    return FusionResult(fused, coarse.weights, fine.weights, (float(g_c), float(g_f)))


def score(query_vec, fused_vec) -> float:
    q = _vec(query_vec)
    e = _vec(fused_vec)
    if q.shape != e.shape:
        raise DimensionMismatch(f"shapes {q.shape} and {e.shape} differ")
    nq, ne = np.linalg.norm(q), np.linalg.norm(e)
    if nq == 0 or ne == 0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    return float(min(1.0, max(-1.0, float(q @ e) / (nq * ne))))


@dataclass(frozen=True)
class GateModel:
    """Affine gate head: sigmoid(weight @ [query; mean(regions)] + bias), weight shape (2, 2*dim)."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    @classmethod
    def load(cls, path) -> "GateModel":
        data = np.load(path)
        if isinstance(data, np.ndarray):
            return cls(data)
        return cls(data["weight"], data["bias"] if "bias" in data else None)


def gate_predictor(query_vec, hier: HierarchicalEmbeddings, model: GateModel | None = None) -> tuple[float, float]:
    if model is None:
        raise NoGateModel("no gate weights configured")
    q = _vec(query_vec)
    agg = _vec(hier.all_vectors()).mean(axis=0)
    x = np.concatenate([q, agg])
    w = _vec(model.weight)
    if w.shape != (2, x.shape[0]):
        raise DimensionMismatch(f"gate weight shape {w.shape}, expected (2, {x.shape[0]})")
    z = w @ x
    if model.bias is not None:
        z = z + _vec(model.bias)
    g = 1.0 / (1.0 + np.exp(-z))
    return float(g[0]), float(g[1])


def score_document(q, hier, config, gate_model=None) -> ScoredDocument:
    gates = gate_predictor(q, hier, gate_model) if gate_model is not None else None
    res = fuse(q, hier, config, gates)
    return ScoredDocument(hier.doc_id, score(q, res.fused), res.coarse_attention,
                          res.fine_attention, res.gates, res.fused)


def rank(scored: Sequence[ScoredDocument], k: int) -> tuple[ScoredDocument, ...]:
    return tuple(sorted(scored, key=lambda d: (-d.score, d.doc_id))[:k])


def retrieve_vector(query_vec, index: EmbeddingIndex, k: int, config: FusionConfig,
                    workers: int = 1, gate_model: GateModel | None = None,
                    query: str = "", query_id: str | None = None) -> RetrievalResult:
    if k < 1:
        raise InvalidInput(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise EmptyIndex("index has no documents")
    q = _vec(query_vec)
    if not np.all(np.isfinite(q)):
        raise InvalidInput("query embedding has non-finite values")
    entries = list(scan(index))
    if workers > 1 and len(entries) > 1:
        chunks = [entries[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(lambda chunk: [score_document(q, h, config, gate_model) for h in chunk], chunks)
            scored = [d for part in parts for d in part]
    else:
        scored = [score_document(q, h, config, gate_model) for h in entries]
    return RetrievalResult(query, rank(scored, k), k, query_id, config)


def retrieve(query: str, index: EmbeddingIndex, k: int, config: FusionConfig, embedder,
             workers: int = 1, gate_model: GateModel | None = None,
             query_id: str | None = None) -> RetrievalResult:
    """Embed the query once, score every indexed document and return the top ``k``."""
    if k < 1:
        raise InvalidInput(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise EmptyIndex("index has no documents")
    q = embedder.embed(query)
    return retrieve_vector(q, index, k, config, workers, gate_model, query, query_id)


def attention_entropy(weights) -> float:
    w = _vec(weights)
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())
