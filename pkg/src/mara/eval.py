"""Retrieval and answer evaluation: MRR@k, Recall@k, answer accuracy, ablation sweeps.

Per-query metric values are kept as exact fractions; aggregates are exact
means of those fractions and only become floats in the report.
"""
from __future__ import annotations

import json
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Mapping, Sequence

from mara.errors import EmptyInput, EmptyPositives, InvalidInput, MaraError, ParseError
from mara.providers import GenerationRequest
from mara.qre import ABLATIONS, FusionConfig, retrieve
from mara.sec import EvidenceController, SecConfig, render, load_template

MODES = ("retrieval", "e2e", "oracle")
DEFAULT_K = 10


@dataclass(frozen=True)
class QueryRecord:
    id: str
    text: str
    positive_doc_ids: frozenset
    gold_answer: str | None = None

    def __post_init__(self):
        if not self.text:
            raise InvalidInput(f"query {self.id!r} has empty text")
        object.__setattr__(self, "positive_doc_ids", frozenset(self.positive_doc_ids))
        if not self.positive_doc_ids:
            raise EmptyPositives(f"query {self.id!r} has no positive documents")


def load_queries(path) -> list[QueryRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(QueryRecord(str(rec["id"]), rec["text"], rec["positive_doc_ids"],
                                       rec.get("gold_answer")))
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line_no) from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad query record: {exc}", line_no) from exc
    return out


# -- metrics -----------------------------------------------------------------

def _check_k(k):
    if k < 1:
        raise InvalidInput(f"k must be >= 1, got {k}")


def reciprocal_rank(ranked_ids: Sequence[str], positives, k: int) -> Fraction:
    _check_k(k)
    positives = set(positives)
    for rank, doc_id in enumerate(ranked_ids[:k], start=1):
        if doc_id in positives:
            return Fraction(1, rank)
    return Fraction(0)


def recall_fraction(ranked_ids: Sequence[str], positives, k: int) -> Fraction:
    _check_k(k)
    positives = set(positives)
    if not positives:
        raise EmptyPositives("recall is undefined without positive documents")
    return Fraction(len(positives & set(ranked_ids[:k])), len(positives))


def mrr_at_k(ranked_ids: Sequence[str], positives, k: int = DEFAULT_K) -> float:
    return float(reciprocal_rank(ranked_ids, positives, k))


def recall_at_k(ranked_ids: Sequence[str], positives, k: int = DEFAULT_K) -> float:
    return float(recall_fraction(ranked_ids, positives, k))


_TRAILING_PUNCT = string.punctuation


def normalize_answer(text: str) -> str:
    text = " ".join(str(text).lower().split())
    return text.rstrip(_TRAILING_PUNCT).strip()


def exact_match_judge(predicted: str, gold: str) -> bool:
    return normalize_answer(predicted) == normalize_answer(gold)


class LLMJudge:
    """Delegates the comparison to a generator and reads a yes/no verdict."""

    def __init__(self, generator, template_dir=None, question: str = ""):
        self.generator = generator
        self.template = load_template("judge", template_dir)
        self.question = question

    def __call__(self, predicted: str, gold: str, question: str | None = None) -> bool:
        prompt = render(self.template, {"user_question": question or self.question,
                                        "predicted_answer": predicted, "gold_answer": gold})
        reply = self.generator.generate(GenerationRequest(prompt, max_tokens=4))
        word = re.sub(r"[^a-z]", "", reply.strip().lower().split()[0]) if reply.strip() else ""
        return word == "yes"


def accuracy(predicted: str | None, gold: str, judge: Callable | None = None) -> dict:
    """``predicted=None`` stands for an abstention and is always incorrect."""
    if gold is None:
        raise InvalidInput("accuracy needs a gold answer")
    if predicted is None:
        return {"correct": False, "abstained": True}
    judge = judge or exact_match_judge
    return {"correct": bool(judge(predicted, gold)), "abstained": False}


# -- harness -----------------------------------------------------------------

@dataclass
class EvalReport:
    k: int
    mode: str
    metrics: dict
    per_query: list[dict]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"k": self.k, "mode": self.mode, "metrics": self.metrics,
                "config": self.config, "per_query": self.per_query}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def table(self) -> str:
        return format_table(self.per_query, self.metrics, self.k)

    def tsv(self) -> str:
        cols = ["query_id", "mrr", "recall", "correct", "abstained", "sufficiency_calls", "calls_made", "error"]
        lines = ["\t".join(cols)]
        for row in self.per_query:
            lines.append("\t".join("" if row.get(c) is None else str(row.get(c)) for c in cols))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(per_query: Sequence[dict], metrics: Mapping, k: int) -> str:
    cols = [("query_id", "query"), ("mrr", f"MRR@{k}"), ("recall", f"R@{k}"),
            ("correct", "correct"), ("sufficiency_calls", "calls")]
    rows = [[h for _, h in cols]]
    rows += [[_fmt(r.get(c)) for c, _ in cols] for r in per_query]
    widths = [max(len(row[i]) for row in rows) for i in range(len(cols))]
    lines = ["  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    summary = [f"{name}: {_fmt(metrics.get(name))}" for name in
               ("mrr_at_k", "recall_at_k", "accuracy", "abstained", "failures", "queries")]
    return "\n".join(lines + [""] + summary) + "\n"


def _mean(values):
    values = list(values)
    if not values:
        return None
    return sum(values, Fraction(0)) / len(values)


def _as_float(x):
    return None if x is None else float(x)


def run_eval(queries: Sequence[QueryRecord], index, fusion_config: FusionConfig,
             sec_config: SecConfig | None, embedder, generator=None, mode: str = "retrieval",
             k: int = DEFAULT_K, judge: Callable | None = None, passages=None,
             attachments=None, workers: int = 1, template_dir=None) -> EvalReport:
    """Evaluate every query; per-query failures are recorded, not raised."""
    if not queries:
        raise EmptyInput("run_eval needs at least one query")
    if mode not in MODES:
        raise InvalidInput(f"mode must be one of {MODES}, got {mode!r}")
    _check_k(k)
    if mode in ("e2e", "oracle") and generator is None:
        raise InvalidInput(f"mode {mode!r} needs a generator")
    sec_config = sec_config or SecConfig()

    def one(q: QueryRecord) -> dict:
        row = {"query_id": q.id, "mrr": None, "recall": None, "correct": None, "abstained": None,
               "sufficiency_calls": None, "calls_made": None, "ranked": None, "answer": None, "error": None}
        try:
            if mode != "oracle":
                result = retrieve(q.text, index, k, fusion_config, embedder, query_id=q.id)
                ranked = result.doc_ids
                row["ranked"] = ranked
                row["_rr"] = reciprocal_rank(ranked, q.positive_doc_ids, k)
                row["_rec"] = recall_fraction(ranked, q.positive_doc_ids, k)
                row["mrr"], row["recall"] = float(row["_rr"]), float(row["_rec"])
            if mode == "e2e":
                ctrl = EvidenceController(generator, sec_config, passages, attachments, template_dir)
                outcome = ctrl.run(q.text, ranked)
                row["answer"] = outcome.answer
                row["sufficiency_calls"] = outcome.sufficiency_calls
                row["calls_made"] = outcome.calls_made
            elif mode == "oracle":
                ctrl = EvidenceController(generator, sec_config, passages, attachments, template_dir)
                gold_docs = sorted(q.positive_doc_ids)
                prompt = render(ctrl.templates["answer"],
                                {"user_question": q.text, "retrieved_passages": ctrl._format(gold_docs, ())})
                atts = ctrl._window_attachments(gold_docs)
                row["answer"] = generator.generate(GenerationRequest(
                    prompt, atts, sec_config.max_tokens, sec_config.temperature))
                row["calls_made"] = 1
            if mode != "retrieval" and q.gold_answer is not None:
                acc = accuracy(row["answer"], q.gold_answer, judge)
                row["correct"], row["abstained"] = acc["correct"], acc["abstained"]
        except MaraError as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        return row

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, queries))
    else:
        rows = [one(q) for q in queries]

    ok = [r for r in rows if r["error"] is None]
    judged = [r for r in ok if r["correct"] is not None]
    metrics = {
        "queries": len(rows),
        "failures": len(rows) - len(ok),
        "mrr_at_k": _as_float(_mean(r["_rr"] for r in ok if "_rr" in r)),
        "recall_at_k": _as_float(_mean(r["_rec"] for r in ok if "_rec" in r)),
        "accuracy": _as_float(_mean(Fraction(int(r["correct"])) for r in judged)),
        "abstained": sum(1 for r in judged if r["abstained"]),
    }
    if mode == "e2e" and ok:
        calls = [r["sufficiency_calls"] for r in ok]
        metrics["avg_sufficiency_calls"] = round(sum(calls) / len(calls), 2)
    for r in rows:
        r.pop("_rr", None)
        r.pop("_rec", None)
    config = {
        "mode": mode,
        "k": k,
        "fusion": fusion_config.to_dict(),
        "sec": sec_config.to_dict(),
        "embedder": getattr(embedder, "id", None),
        "index": {"docs": len(index), "dim": index.dim, "m": index.m, "k": index.k,
                  "embedder_id": index.embedder_id},
    }
    return EvalReport(k, mode, metrics, rows, config)


def ablation_sweep(queries, index, fusion_config: FusionConfig, *args, ablations=ABLATIONS, **kwargs) -> dict:
    """Run :func:`run_eval` once per ablation setting, keyed by ablation name."""
    return {ab: run_eval(queries, index, fusion_config.with_ablation(ab), *args, **kwargs) for ab in ablations}
