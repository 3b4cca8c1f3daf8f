"""``mara`` command line: ingest, index, retrieve, answer, eval, stats, serve."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

from mara.config import EngineConfig, load_config
from mara.corpus import DecompositionConfig, load_corpus_dir, load_manifest, write_corpus_dir
from mara.errors import MaraError
from mara.index import build_index, load, persist
from mara.providers import parse_embedder_spec
from mara.qre import ABLATIONS

log = logging.getLogger("mara")


def _config(args) -> EngineConfig:
    return load_config(args.config) if getattr(args, "config", None) else EngineConfig()


def _engine(args):
    from mara.engine import Engine

    cfg = _config(args)
    if getattr(args, "corpus", None):
        cfg.paths["corpus"] = str(args.corpus)
    embedder = parse_embedder_spec(args.embedder) if getattr(args, "embedder", None) else None
    return Engine.from_config(cfg, args.index, embedder=embedder)


def cmd_ingest(args):
    corpus = load_manifest(args.manifest)
    config = DecompositionConfig.parse(args.coarse, args.fine)
    out = write_corpus_dir(corpus, config, args.out)
    print(f"ingested {len(corpus)} documents ({config.region_count} regions each) into {out}")


def cmd_index(args):
    corpus, decomposition = load_corpus_dir(args.corpus)
    if args.embedder:
        embedder = parse_embedder_spec(args.embedder)
    else:
        from mara.providers import make_embedder

        embedder = make_embedder(_config(args).providers["embed"])
    index = build_index(corpus, decomposition, embedder, max_inflight=args.workers)
    persist(index, args.out)
    print(f"indexed {len(index)} documents: dim={index.dim} m={index.m} k={index.k} -> {args.out}")


def _write_delimited(rows, header, out=None, sep="\t"):
    out = out or sys.stdout
    out.write(sep.join(header) + "\n")
    for row in rows:
        out.write(sep.join(str(v) for v in row) + "\n")


def cmd_retrieve(args):
    engine = _engine(args)
    result = engine.retrieve(args.query, args.k, args.ablation, workers=args.workers)
    if args.format == "json" or args.explain:
        payload = result.to_dict(explain=args.explain)
        payload["config_hash"] = engine.config.snapshot_hash()
        print(json.dumps(payload, indent=2))
    else:
        _write_delimited(([i, d.doc_id, f"{d.score:.6f}"] for i, d in enumerate(result.ranked, 1)),
                         ["rank", "doc_id", "score"])
    if args.plot_dir:
        from mara.plotting import plot_attention

        decomposition = engine.decomposition
        if (decomposition.m, decomposition.k) != (engine.index.m, engine.index.k):
            decomposition = DecompositionConfig((1, engine.index.m), (1, engine.index.k))
        for i, d in enumerate(result.ranked, 1):
            path = plot_attention(d, decomposition.coarse_grid, decomposition.fine_grid,
                                  Path(args.plot_dir) / f"attention_{i:02d}_{d.doc_id}.png")
            log.info("wrote %s", path)


def cmd_answer(args):
    engine = _engine(args)
    result, outcome = engine.answer(args.query, args.k, args.window, args.stride,
                                    True if args.feedback else None, args.ablation)
    payload = outcome.to_dict()
    payload["candidates"] = result.doc_ids
    payload["config_hash"] = engine.config.snapshot_hash()
    print(json.dumps(payload, indent=2, ensure_ascii=False))
    if args.transcript:
        from mara.sec import transcript_lines

        Path(args.transcript).write_text(transcript_lines(outcome), encoding="utf-8")


def cmd_eval(args):
    from mara.eval import ablation_sweep, load_queries, run_eval

    engine = _engine(args)
    queries = load_queries(args.queries)
    passages, attachments = engine.passages()
    sec_cfg = engine.sec_config(args.window, args.stride, True if args.feedback else None)
    kwargs = dict(generator=engine.generator() if args.mode != "retrieval" else None, mode=args.mode,
                  k=args.k, judge=engine.judge(), passages=passages, attachments=attachments,
                  workers=args.workers, template_dir=engine.template_dir)
    if args.sweep:
        reports = ablation_sweep(queries, engine.index, engine.fusion(), sec_cfg, engine.embedder, **kwargs)
    else:
        ablation = args.ablation or engine.config.fusion.ablation
        reports = {ablation: run_eval(queries, engine.index, engine.fusion(ablation), sec_cfg,
                                      engine.embedder, **kwargs)}
    for name, report in reports.items():
        report.config["config_hash"] = engine.config.snapshot_hash()
        if len(reports) > 1:
            print(f"== {name}")
        print(report.table())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        if len(reports) == 1:
            report = next(iter(reports.values()))
            out.write_text(report.to_json(), encoding="utf-8")
            out.with_suffix(".tsv").write_text(report.tsv(), encoding="utf-8")
        else:
            blob = {name: r.to_dict() for name, r in reports.items()}
            out.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n", encoding="utf-8")
            lines = ["ablation\tmrr_at_k\trecall_at_k\taccuracy\tfailures"]
            for name, r in reports.items():
                m = r.metrics
                lines.append(f"{name}\t{m['mrr_at_k']}\t{m['recall_at_k']}\t{m['accuracy']}\t{m['failures']}")
            out.with_suffix(".tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        if not args.no_figures:
            from mara.plotting import plot_metric_bars

            plot_metric_bars({n: r.metrics for n, r in reports.items()},
                             out.with_name(out.stem + "_metrics.png"))


def _outcome_counts(path: Path):
    """Per-query (sufficiency calls, generator calls) from an eval report (JSON) or transcript (JSONL)."""
    text = path.read_text(encoding="utf-8")
    try:
        blob = json.loads(text)
    except json.JSONDecodeError:
        blob = None
    if isinstance(blob, dict):
        reports = [blob] if "per_query" in blob else list(blob.values())
        return [SimpleNamespace(sufficiency_calls=r["sufficiency_calls"], calls_made=r["calls_made"])
                for rep in reports for r in rep["per_query"] if r.get("sufficiency_calls") is not None]
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    return [SimpleNamespace(sufficiency_calls=sum(1 for r in records if r.get("role") == "sufficiency"),
                            calls_made=len(records))]


def cmd_stats(args):
    from mara.sec import call_stats

    table = {}
    for p in args.inputs:
        path = Path(p)
        counts = _outcome_counts(path)
        table[path.stem] = call_stats(counts)
    _write_delimited(([name, s["total_calls"], s["queries"], f"{s['avg_calls']:.2f}",
                       s["total_generator_calls"]] for name, s in table.items()),
                     ["source", "total_calls", "queries", "avg_calls", "total_generator_calls"])
    if args.plot:
        from mara.plotting import plot_call_stats

        plot_call_stats(table, args.plot)


def cmd_serve(args):
    from mara.engine import Engine
    from mara.service import serve

    cfg = _config(args)
    index_path = args.index or cfg.paths.get("index")
    if not index_path:
        raise MaraError("serve needs --index or paths.index in the config")
    print(f"serving on http://{args.host}:{args.port}", flush=True)
    serve(lambda: Engine.from_config(cfg, index_path), args.host, args.port)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mara", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="decompose documents listed in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--coarse", default="2x2", help="coarse grid RxC")
    s.add_argument("--fine", default="2x2", help="fine grid RxC per coarse region")
    s.add_argument("--out", required=True, help="corpus directory to write")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("index", help="embed a corpus directory into an index file")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--embedder", help="mock[:DIM[:SEED]] or http[:MODEL]; default from --config")
    s.add_argument("--config")
    s.add_argument("--workers", type=int, default=None)
    s.set_defaults(func=cmd_index)

    def common(s, k=True):
        s.add_argument("--index", required=True)
        s.add_argument("--config")
        s.add_argument("--embedder")
        s.add_argument("--corpus", help="corpus directory, for passage text")
        s.add_argument("--ablation", choices=ABLATIONS)
        if k:
            s.add_argument("--k", type=int, default=10)

    s = sub.add_parser("retrieve", help="rank indexed documents for a query")
    common(s)
    s.add_argument("--query", required=True)
    s.add_argument("--explain", action="store_true", help="emit attention maps and gates")
    s.add_argument("--format", choices=("tsv", "json"), default="tsv")
    s.add_argument("--plot-dir", help="write attention heatmaps here")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("answer", help="retrieve, then answer through the evidence controller")
    common(s)
    s.add_argument("--query", required=True)
    s.add_argument("--window", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--feedback", action="store_true")
    s.add_argument("--transcript", help="write the call transcript as JSON lines")
    s.set_defaults(func=cmd_answer)

    s = sub.add_parser("eval", help="evaluate retrieval and answers over a query manifest")
    common(s)
    s.add_argument("--queries", required=True)
    s.add_argument("--mode", choices=("retrieval", "e2e", "oracle"), default="retrieval")
    s.add_argument("--sweep", action="store_true", help="run every ablation")
    s.add_argument("--window", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--feedback", action="store_true")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", help="report JSON; a .tsv and a metrics figure are written alongside")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="controller call statistics from eval reports or transcripts")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--plot", help="write a bar chart here")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("serve", help="HTTP service for retrieve/answer")
    s.add_argument("--config")
    s.add_argument("--index")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (MaraError, OSError) as exc:
        print(f"mara: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
