"""Adaptive multi-granular retrieval and evidence-controlled answering."""

from mara.corpus import Corpus, DecompositionConfig, Document, Region, decompose, load_manifest
from mara.index import EmbeddingIndex, HierarchicalEmbeddings, build_index, load, persist
from mara.qre import FusionConfig, RetrievalResult, ScoredDocument, retrieve
from mara.sec import SecConfig, SecOutcome, SufficiencySignal, run

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "DecompositionConfig",
    "Document",
    "EmbeddingIndex",
    "FusionConfig",
    "HierarchicalEmbeddings",
    "Region",
    "RetrievalResult",
    "ScoredDocument",
    "SecConfig",
    "SecOutcome",
    "SufficiencySignal",
    "build_index",
    "decompose",
    "load",
    "load_manifest",
    "persist",
    "retrieve",
    "run",
]
