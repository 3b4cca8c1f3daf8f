"""Synthetic text corpora with planted fine regions, for offline end-to-end runs.

Every document is built from ``m * k`` equal-length segments so that the text
decomposer's character slices fall exactly on segment boundaries. Each
query's positive document carries one fine segment whose text *is* the query,
so a content-hash embedder gives that patch the query's exact vector. The
generator then picks filler for the positives until the planted patch is the
only thing lifting them into the top ``k``: ranked below ``k`` on global
vectors alone, inside the top ``k`` with full fusion.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mara.corpus import DecompositionConfig
from mara.eval import QueryRecord
from mara.index import HierarchicalEmbeddings, from_arrays
from mara.providers import MockEmbedder
from mara.qre import FusionConfig, retrieve_vector

_WORDS = ("amber", "basalt", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "indigo",
          "jasper", "kelp", "lumen", "marble", "nickel", "onyx", "pewter", "quartz", "russet",
          "sienna", "tundra", "umber", "vellum", "willow", "xenon", "yarrow", "zephyr")


@dataclass
class PlantedCorpus:
    root: Path
    manifest: Path
    queries_path: Path
    queries: list[QueryRecord]
    positives: dict          # query id -> doc id
    texts: dict              # doc id -> full text


def _pad(text: str, width: int) -> str:
    if len(text) > width:
        raise ValueError(f"segment {text!r} longer than {width}")
    return text + "." * (width - len(text))


def _embed_doc(embedder, segments, m, k):
    fine = [embedder.embed(s) for s in segments]
    coarse = [embedder.embed("".join(segments[i * k:(i + 1) * k])) for i in range(m)]
    g = embedder.embed("".join(segments))
    return g, np.stack(coarse), np.stack(fine).reshape(m, k, -1)


def _rank_of(doc_id, q_vec, arrays, ids, config, k):
    idx = from_arrays(ids, *arrays)
    ranked = retrieve_vector(q_vec, idx, len(ids), config).doc_ids
    return ranked.index(doc_id) + 1


def write_planted_corpus(out_dir, n_docs: int = 20, n_queries: int = 5, seed: int = 0,
                         embedder=None, fusion: FusionConfig | None = None,
                         decomposition: DecompositionConfig | None = None,
                         k: int = 10, segment_len: int = 56, max_tries: int = 200) -> PlantedCorpus:
    if n_queries > n_docs:
        raise ValueError("need at least one document per query")
    embedder = embedder or MockEmbedder(64, 0)
    fusion = fusion or FusionConfig()
    decomposition = decomposition or DecompositionConfig()
    m, kk = decomposition.m, decomposition.k
    n_seg = m * kk
    rng = random.Random(seed)
    out = Path(out_dir)
    (out / "docs").mkdir(parents=True, exist_ok=True)

    ids = [f"d{i:02d}" for i in range(n_docs)]
    queries, golds, positives = [], [], {}
    pos_docs = rng.sample(ids, n_queries)
    for qi in range(n_queries):
        word = _WORDS[(qi + seed) % len(_WORDS)]
        queries.append(_pad(f"q{qi:02d} which value is recorded for the {word} series?", segment_len))
        golds.append(f"{word}-{rng.randrange(100, 1000)}")
        positives[f"q{qi:02d}"] = pos_docs[qi]

    def filler(doc_id, j, nonce):
        return _pad(f"{doc_id} filler {j} {nonce} {rng.choice(_WORDS)}", segment_len)

    segments = {}
    for i, d in enumerate(ids):
        segs = [filler(d, j, 0) for j in range(n_seg)]
        if d not in pos_docs and i % 4 == 1:
            segs[rng.randrange(n_seg)] = _pad(f"EVIDENCE: {d} notes a related trend;", segment_len)
        segments[d] = segs
    planted_at = {}
    for qi, d in enumerate(pos_docs):
        slot = rng.randrange(n_seg)
        answer_slot = (slot + 1 + rng.randrange(n_seg - 1)) % n_seg if n_seg > 1 else slot
        planted_at[d] = (qi, slot, answer_slot)

    def positive_segments(d, nonce):
        qi, slot, answer_slot = planted_at[d]
        segs = [filler(d, j, nonce) for j in range(n_seg)]
        segs[answer_slot] = _pad(f"ANSWER: {golds[qi]};", segment_len)
        segs[slot] = queries[qi]
        return segs

    for d in pos_docs:
        segments[d] = positive_segments(d, 0)

    emb = {d: _embed_doc(embedder, segments[d], m, kk) for d in ids}
    q_vecs = [embedder.embed(q) for q in queries]
    global_only = fusion.with_ablation("global_only")

    def arrays():
        return (np.stack([emb[d][0] for d in ids]), np.stack([emb[d][1] for d in ids]),
                np.stack([emb[d][2] for d in ids]))

    def satisfied(qi):
        d = pos_docs[qi]
        a = arrays()
        return (_rank_of(d, q_vecs[qi], a, ids, global_only, k) > k
                and _rank_of(d, q_vecs[qi], a, ids, fusion, k) <= k)

    nonces = {d: 0 for d in pos_docs}
    for _ in range(max_tries):
        bad = [qi for qi in range(n_queries) if not satisfied(qi)]
        if not bad:
            break
        for qi in bad:
            d = pos_docs[qi]
            nonces[d] += 1
            segments[d] = positive_segments(d, nonces[d])
            emb[d] = _embed_doc(embedder, segments[d], m, kk)
    else:
        raise RuntimeError("could not plant a fixture satisfying the ranking constraints")

    texts = {}
    with (out / "manifest.jsonl").open("w", encoding="utf-8") as fh:
        for d in ids:
            texts[d] = "".join(segments[d])
            (out / "docs" / f"{d}.txt").write_text(texts[d], encoding="utf-8")
            fh.write(json.dumps({"id": d, "source_uri": f"docs/{d}.txt", "payload_kind": "text",
                                 "metadata": {"role": "positive" if d in pos_docs else "distractor"}}) + "\n")
    records = []
    with (out / "queries.jsonl").open("w", encoding="utf-8") as fh:
        for qi, q in enumerate(queries):
            qid = f"q{qi:02d}"
            rec = QueryRecord(qid, q, frozenset([positives[qid]]), golds[qi])
            records.append(rec)
            fh.write(json.dumps({"id": qid, "text": q, "positive_doc_ids": [positives[qid]],
                                 "gold_answer": golds[qi]}) + "\n")
    return PlantedCorpus(out, out / "manifest.jsonl", out / "queries.jsonl", records, positives, texts)


def random_index(rng: np.random.Generator, n_docs: int, dim: int, m: int = 4, k: int = 4):
    """Random float32 index for property tests; entries are not normalised."""
    ids = [f"doc{i:04d}" for i in range(n_docs)]
    g = rng.standard_normal((n_docs, dim)).astype(np.float32)
    c = rng.standard_normal((n_docs, m, dim)).astype(np.float32)
    f = rng.standard_normal((n_docs, m, k, dim)).astype(np.float32)
    return from_arrays(ids, g, c, f, embedder_id="random")


__all__ = ["PlantedCorpus", "write_planted_corpus", "random_index", "HierarchicalEmbeddings"]
