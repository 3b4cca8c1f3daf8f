"""Wiring of config, index, providers and corpus text into one query engine."""
from __future__ import annotations

import re
from dataclasses import replace

import numpy as np

from mara.config import EngineConfig
from mara.corpus import Corpus, load_corpus_dir
from mara.errors import InvalidConfig
from mara.eval import LLMJudge, exact_match_judge
from mara.index import EmbeddingIndex, load
from mara.providers import MockEmbedder, ScriptedGenerator, make_embedder, make_generator
from mara.qre import FusionConfig, GateModel, RetrievalResult, attention_entropy, retrieve
from mara.sec import EvidenceController, SecConfig, SecOutcome

_MOCK_ID = re.compile(r"^mock:dim=(\d+):seed=(-?\d+)$")


def embedder_from_id(embedder_id: str):
    """Rebuild a mock embedder from the id recorded in an index header."""
    m = _MOCK_ID.match(embedder_id or "")
    if m is None:
        return None
    return MockEmbedder(int(m.group(1)), int(m.group(2)))


def corpus_views(corpus: Corpus):
    """Passage text and attachment refs the controller shows for each document."""
    texts: dict = {}

    def passage(doc_id):
        if doc_id not in corpus:
            return None
        doc = corpus[doc_id]
        if doc.payload_kind == "image":
            return f"(image page {doc_id})"
        if doc_id not in texts:
            texts[doc_id] = doc.read_text()
        return texts[doc_id]

    def attachments(doc_id):
        if doc_id in corpus and corpus[doc_id].payload_kind == "image":
            return [corpus[doc_id].source_uri]
        return []

    return passage, attachments


def attention_summary(doc) -> dict:
    def top(weights):
        i = int(np.argmax(weights))
        return {"index": i, "weight": float(weights[i]), "entropy": attention_entropy(weights)}

    return {"coarse": top(doc.coarse_attention), "fine": top(doc.fine_attention),
            "gates": {"g_c": doc.gates_used[0], "g_f": doc.gates_used[1]}}


class Engine:
    def __init__(self, config: EngineConfig, index: EmbeddingIndex | None = None, embedder=None,
                 corpus: Corpus | None = None):
        self.config = config
        self.index = index
        self._embedder = embedder
        self.decomposition = config.decomposition
        if corpus is None and config.paths.get("corpus"):
            corpus, self.decomposition = load_corpus_dir(config.paths["corpus"])
        self.corpus = corpus
        self._shared_generator = None
        self.gate_model = GateModel.load(config.gate_weights) if config.gate_weights else None

    @classmethod
    def from_config(cls, config: EngineConfig, index_path=None, **kw) -> "Engine":
        path = index_path or config.paths.get("index")
        index = load(path) if path else None
        return cls(config, index, **kw)

    @property
    def template_dir(self):
        return self.config.paths.get("templates")

    @property
    def embedder(self):
        if self._embedder is None:
            profile = self.config.providers["embed"]
            recorded = embedder_from_id(self.index.embedder_id) if self.index is not None else None
            # an index built with a mock embedder must be queried with the same one
            self._embedder = recorded if (recorded is not None and profile.get("kind") == "mock") \
                else make_embedder(profile)
        return self._embedder

    def generator(self):
        profile = self.config.providers["generate"]
        if profile.get("kind") == "scripted":
            return ScriptedGenerator(profile.get("script", ()))
        if self._shared_generator is None:
            self._shared_generator = make_generator(profile)
        return self._shared_generator

    def judge(self):
        profile = self.config.providers.get("judge", {"kind": "exact"})
        if profile.get("kind") == "llm":
            return LLMJudge(make_generator(profile["generator"]), self.template_dir)
        return exact_match_judge

    def fusion(self, ablation: str | None = None) -> FusionConfig:
        cfg = self.config.fusion
        return cfg.with_ablation(ablation) if ablation else cfg

    def sec_config(self, window=None, stride=None, feedback=None) -> SecConfig:
        cfg = self.config.sec
        changes = {}
        if window is not None:
            changes["window_size"] = window
            changes["stride"] = stride if stride is not None else window
        elif stride is not None:
            changes["stride"] = stride
        if feedback is not None:
            changes["enable_feedback"] = feedback
        return replace(cfg, **changes) if changes else cfg

    def _require_index(self):
        if self.index is None:
            raise InvalidConfig("no index loaded")
        return self.index

    def retrieve(self, query: str, k: int = 10, ablation: str | None = None, workers: int = 1) -> RetrievalResult:
        return retrieve(query, self._require_index(), k, self.fusion(ablation), self.embedder,
                        workers=workers, gate_model=self.gate_model)

    def controller(self, sec_config: SecConfig, generator=None) -> EvidenceController:
        passages = attachments = None
        if self.corpus is not None:
            passages, attachments = corpus_views(self.corpus)
        return EvidenceController(generator or self.generator(), sec_config, passages, attachments,
                                  self.template_dir)

    def answer(self, query: str, k: int = 10, window=None, stride=None, feedback=None,
               ablation: str | None = None) -> tuple[RetrievalResult, SecOutcome]:
        result = self.retrieve(query, k, ablation)
        ctrl = self.controller(self.sec_config(window, stride, feedback))
        return result, ctrl.run(query, result.ranked)

    def passages(self):
        if self.corpus is None:
            return None, None
        return corpus_views(self.corpus)

