"""``skbrank`` command line.

Exit codes: 0 ok, 1 usage, 2 bad input data, 3 transport or endpoint failure.
Settings come from ``--config`` (a JSON file) and are overridden by flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .embed import EmbedError
from .evaluation import evaluate, read_gold
from .fusion import (
    PUBLISHED_DYNAMIC,
    PUBLISHED_RERANK_STATIC,
    PUBLISHED_STATIC,
    StaticRrfConfig,
    ValQuery,
    config_from_dict,
    fuse_runs,
    grid_search,
    load_grid,
)
from .llm import (
    ClientConfig,
    HttpTransport,
    LlmPlanner,
    LlmScorer,
    MockPlanner,
    MockTransport,
    TransportError,
    load_pack,
    pack_names,
)
from .pipeline import (
    ArtifactError,
    PipelineSettings,
    build_artifacts,
    file_sha256,
    load_artifacts,
    provenance,
    read_queries,
    run_rerank,
    run_stage1,
)
from .plan import PlanError, parse_plan
from .ranking import QueryMeta, RankedList, RunFormatError, read_meta, read_run, write_meta, write_run
from .rerank import SerializationCaps, TableScorer, LexicalScorer, build_record, write_records
from .skb import SkbError, SkbLoadError

log = logging.getLogger("skbrank")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRANSPORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ---------------------------------------------------------------


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    with open(args.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{args.config}: top level must be an object")
    return doc


def _inputs(**paths) -> dict:
    """Content hashes of the input files, so provenance ignores where files live."""
    return {k: file_sha256(v) for k, v in sorted(paths.items()) if v and Path(v).is_file()}


def _settings(args, cfg: dict, base: dict | None = None) -> PipelineSettings:
    doc = dict(base or {})
    doc.update(cfg.get("settings", {}))
    s = PipelineSettings(**doc)
    if getattr(args, "embedder", None):
        s.embedder = {"kind": args.embedder.partition(":")[0], "dim": int(args.embedder.partition(":")[2] or 256)}
    if getattr(args, "doc_max_len", None) is not None:
        s.doc_max_len = args.doc_max_len
    if getattr(args, "link_params", None):
        s.link_params = json.loads(args.link_params)
    if getattr(args, "max_assignments", None) is not None:
        s.max_assignments = args.max_assignments
    if getattr(args, "seed", None) is not None:
        s.seed = args.seed
    return s


def _client(args, cfg: dict) -> ClientConfig:
    doc = dict(cfg.get("client", {}))
    for flag, key in (("endpoint", "endpoint"), ("model", "model"), ("api_key_env", "api_key_env"), ("max_retries", "max_retries")):
        v = getattr(args, flag, None)
        if v is not None:
            doc[key] = v
    if getattr(args, "retry_with_diagnostics", False):
        doc["retry_with_diagnostics"] = True
    return ClientConfig.from_dict(doc)


def _pack_name(args, cfg: dict) -> str:
    return getattr(args, "pack", None) or cfg.get("pack") or "amazon"


def _planner(args, cfg: dict, schema):
    if getattr(args, "plans", None):
        return MockPlanner.from_file(args.plans)
    client = _client(args, cfg)
    pack = load_pack(_pack_name(args, cfg))
    if getattr(args, "mock_responses", None):
        return LlmPlanner(pack, MockTransport.from_file(args.mock_responses), schema, client)
    if getattr(args, "endpoint", None) or "client" in cfg:
        return LlmPlanner(pack, HttpTransport(client), schema, client)
    raise UsageError("no planner: pass --plans FILE, --mock-responses FILE or --endpoint URL")


def _scorer(args, cfg: dict):
    if getattr(args, "mock_scores", None):
        with open(args.mock_scores, encoding="utf-8") as fh:
            return TableScorer(json.load(fh))
    if getattr(args, "mock_responses", None):
        return LlmScorer(MockTransport.from_file(args.mock_responses))
    if getattr(args, "endpoint", None):
        return LlmScorer(HttpTransport(_client(args, cfg)))
    return LexicalScorer()


def _caps(args, cfg: dict) -> SerializationCaps:
    doc = dict(cfg.get("rerank", {}).get("caps", {}))
    if getattr(args, "max_text_field_tokens", None) is not None:
        doc["max_text_field_tokens"] = args.max_text_field_tokens
    if getattr(args, "max_neighbors_per_relation", None) is not None:
        doc["max_neighbors_per_relation"] = args.max_neighbors_per_relation
    if getattr(args, "relation_style", None):
        doc["relation_style"] = args.relation_style
    return SerializationCaps(**doc)


def _static_from_flags(args, doc: dict | None, published: dict, what: str) -> StaticRrfConfig:
    if args.w is not None or args.k is not None:
        if args.w is None or args.k is None:
            raise UsageError(f"{what}: pass both --w and --k")
        return StaticRrfConfig(args.w, args.k)
    if getattr(args, "published", None):
        return published[args.published]
    if doc:
        cfg = config_from_dict(doc)
        if not isinstance(cfg, StaticRrfConfig):
            raise UsageError(f"{what}: needs a static configuration")
        return cfg
    raise UsageError(f"{what}: pass --w/--k, --published or a config")


def _fusion(args, cfg: dict):
    if args.fusion:
        with open(args.fusion, encoding="utf-8") as fh:
            return config_from_dict(json.load(fh))
    if args.published:
        return (PUBLISHED_DYNAMIC if args.mode == "dynamic" else PUBLISHED_STATIC)[args.published]
    if args.w is not None or args.k is not None:
        return _static_from_flags(args, None, {}, "fuse")
    if "fusion" in cfg:
        return config_from_dict(cfg["fusion"])
    raise UsageError("fuse: pass --fusion FILE, --published NAME or --w/--k")


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path == "-" or path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# -- commands --------------------------------------------------------------


def cmd_index(args, cfg) -> int:
    settings = _settings(args, cfg)
    manifest = build_artifacts(args.skb, args.out, settings)
    n = len(manifest["indices"])
    print(f"indexed {manifest['graph']['nodes']} nodes, {n} vector indices -> {args.out}")
    return EXIT_OK


def _index_settings(args, cfg, art) -> PipelineSettings:
    base = {k: art.manifest["settings"][k] for k in ("embedder", "doc_max_len")}
    base.update({k: v for k, v in cfg.get("settings", {}).items() if k not in base})
    s = _settings(args, {}, base)
    return s


def cmd_plan(args, cfg) -> int:
    art = load_artifacts(args.index)
    queries = read_queries(args.queries)
    planner = _planner(args, cfg, art.graph.schema)
    prov = provenance({"command": "plan", "pack": _pack_name(args, cfg), "inputs": _inputs(queries=args.queries, plans=args.plans, mock=args.mock_responses)}, args.seed or 0)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in prov.items()) + "\n")
        for qid in sorted(queries):
            diags: list[str] = []
            try:
                raw = planner(qid, queries[qid])
                plan = parse_plan(raw, art.graph.schema) if isinstance(raw, str) else raw
                rec = {"qid": qid, "plan": plan.to_dict()}
            except PlanError as exc:
                rec = {"qid": qid, "plan": None}
                diags = [str(d) for d in exc.diagnostics]
            except KeyError as exc:
                rec = {"qid": qid, "plan": None}
                diags = [f"no plan for {exc}"]
            if isinstance(planner, LlmPlanner):
                diags += planner.diagnostics.get(qid, [])
            rec["diagnostics"] = diags
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    print(f"wrote plans for {len(queries)} queries -> {args.out}")
    return EXIT_OK


def cmd_retrieve(args, cfg) -> int:
    art = load_artifacts(args.index)
    settings = _index_settings(args, cfg, art)
    queries = read_queries(args.queries)
    planner = _planner(args, cfg, art.graph.schema)
    t0 = time.perf_counter()
    results = run_stage1(art, queries, planner, settings)
    elapsed = time.perf_counter() - t0
    prov = provenance(
        {
            "command": "retrieve",
            "settings": settings.to_dict(),
            "index": art.manifest["config_hash"],
            "inputs": _inputs(queries=args.queries, plans=args.plans, mock=args.mock_responses),
        },
        settings.seed,
    )
    write_run(args.out, [results[q].ranking for q in sorted(results)], header=prov)
    write_meta(args.meta, {q: r.meta for q, r in results.items()}, header=prov)
    if args.diagnostics:
        with open(args.diagnostics, "w", encoding="utf-8") as fh:
            for qid in sorted(results):
                if results[qid].diagnostics:
                    fh.write(json.dumps({"qid": qid, "diagnostics": results[qid].diagnostics}) + "\n")
    failed = sum(1 for r in results.values() if not r.meta.valid)
    print(f"retrieved {len(results)} queries in {elapsed:.2f}s ({failed} without a usable plan)")
    return EXIT_OK


def _runs_and_meta(args):
    runs_g = read_run(args.graph_run)
    runs_m = read_run(args.dense_run)
    metas = read_meta(args.meta) if args.meta else {}
    return runs_g, runs_m, metas


def cmd_fuse(args, cfg) -> int:
    runs_g, runs_m, metas = _runs_and_meta(args)
    fusion = _fusion(args, cfg)
    fused = fuse_runs(runs_g, runs_m, fusion, metas)
    prov = provenance(
        {"command": "fuse", "fusion": fusion.to_dict(), "inputs": _inputs(g=args.graph_run, m=args.dense_run, meta=args.meta)},
        args.seed or 0,
    )
    write_run(args.out, fused, header=prov)
    print(f"fused {len(fused)} queries with {fusion.to_dict()} -> {args.out}")
    return EXIT_OK


def cmd_tune(args, cfg) -> int:
    runs_g, runs_m, metas = _runs_and_meta(args)
    gold = read_gold(args.gold)
    val = [
        ValQuery(
            runs_g.get(q, RankedList(q)),
            runs_m.get(q, RankedList(q)),
            metas.get(q, QueryMeta()),
            gold[q],
        )
        for q in gold
    ]
    grid = None
    if args.grid:
        grids = load_grid(args.grid)
        if args.mode not in grids:
            raise UsageError(f"{args.grid} has no {args.mode} grid")
        grid = grids[args.mode]
    best, report = grid_search(val, args.mode, grid)
    prov = provenance(
        {"command": "tune", "mode": args.mode, "inputs": _inputs(g=args.graph_run, m=args.dense_run, meta=args.meta, gold=args.gold, grid=args.grid)},
        args.seed or 0,
    )
    i = report.best_index
    doc = {
        **best.to_dict(),
        "validation": {"hit@1": float(report.hit1[i]), "recall@20": float(report.recall20[i]), "n_queries": report.n_queries, "grid_points": len(report)},
        **prov,
    }
    _write_json(args.out, doc)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in prov.items()) + "\n")
            report.write_tsv(fh)
    print(f"best {args.mode} config over {len(report)} points: {best.to_dict()}", file=sys.stderr)
    return EXIT_OK


def cmd_export(args, cfg) -> int:
    art = load_artifacts(args.index)
    runs = read_run(args.run)
    gold = read_gold(args.gold)
    queries = read_queries(args.queries) if args.queries else {}
    caps = _caps(args, cfg)
    records = [
        build_record(runs.get(q, RankedList(q)), gold[q], queries.get(q, gold.query(q)), args.pool_size, args.neg_count)
        for q in gold
    ]
    write_records(args.out, records, art.graph, caps)
    usable = sum(r.usable for r in records)
    print(f"exported {len(records)} records ({usable} usable) -> {args.out}")
    return EXIT_OK


def cmd_rerank(args, cfg) -> int:
    art = load_artifacts(args.index)
    fused = read_run(args.run)
    queries = read_queries(args.queries)
    caps = _caps(args, cfg)
    rcfg = cfg.get("rerank", {})
    fuse_cfg = _static_from_flags(args, rcfg.get("fusion"), PUBLISHED_RERANK_STATIC, "rerank")
    depth = args.depth if args.depth is not None else int(rcfg.get("depth", 100))
    instruction = load_pack(_pack_name(args, cfg)).reranker_instruction
    scorer = _scorer(args, cfg)
    final, diags = run_rerank(art, fused, queries, scorer, fuse_cfg, caps, depth, instruction, args.max_in_flight)
    prov = provenance(
        {
            "command": "rerank",
            "fusion": fuse_cfg.to_dict(),
            "depth": depth,
            "caps": {k: v for k, v in caps.__dict__.items() if k != "text_fields"},
            "scorer": type(scorer).__name__,
            "inputs": _inputs(run=args.run, queries=args.queries, scores=args.mock_scores, mock=args.mock_responses),
        },
        args.seed or 0,
    )
    write_run(args.out, final, header=prov)
    for qid in sorted(diags):
        for d in diags[qid]:
            log.warning(d)
    print(f"reranked {len(final)} queries (depth {depth}) -> {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    runs = read_run(args.run)
    gold = read_gold(args.gold)
    table = evaluate(runs, gold)
    sys.stdout.write(table.render(args.label))
    if args.json:
        prov = provenance({"command": "eval", "inputs": _inputs(run=args.run, gold=args.gold)}, args.seed or 0)
        _write_json(args.json, {**table.to_dict(), **prov})
    return EXIT_OK


def cmd_serve(args, cfg) -> int:
    from .serve import RetrievalService, make_server

    art = load_artifacts(args.index)
    settings = _index_settings(args, cfg, art)
    planner = _planner(args, cfg, art.graph.schema)
    dense = read_run(args.dense_run) if args.dense_run else None
    fusion = None
    if args.fusion or args.published or "fusion" in cfg:
        fusion = _fusion(args, cfg)
    service = RetrievalService(art, planner, settings, dense, fusion)
    server = make_server(service, args.host, args.port)
    print(f"serving on http://{args.host}:{server.server_address[1]}/retrieve", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def _planner_flags(p) -> None:
    g = p.add_argument_group("planner")
    g.add_argument("--plans", help="JSONL of fixture plans keyed by qid (offline)")
    g.add_argument("--mock-responses", help="JSONL of canned chat responses keyed by request hash")
    g.add_argument("--pack", choices=pack_names(), help="prompt pack (default amazon)")
    g.add_argument("--endpoint", help="OpenAI-compatible base URL")
    g.add_argument("--model")
    g.add_argument("--api-key-env", help="environment variable holding the API key")
    g.add_argument("--max-retries", type=int)
    g.add_argument("--retry-with-diagnostics", action="store_true", help="append parse errors to retry turns")


def _stage1_flags(p) -> None:
    p.add_argument("--link-params", help='JSON, e.g. {"name": [5, 0.95], "doc": [10, 0.9]}')
    p.add_argument("--max-assignments", type=int)


def _caps_flags(p) -> None:
    p.add_argument("--max-text-field-tokens", type=int)
    p.add_argument("--max-neighbors-per-relation", type=int)
    p.add_argument("--relation-style", choices=("spaced", "raw"))


def _fusion_flags(p) -> None:
    p.add_argument("--fusion", help="fusion config JSON (as written by tune)")
    p.add_argument("--published", choices=sorted(PUBLISHED_STATIC), help="use a published configuration")
    p.add_argument("--mode", choices=("static", "dynamic"), default="static")
    p.add_argument("--w", type=float)
    p.add_argument("--k", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skbrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON settings file; flags take precedence")
    common.add_argument("--seed", type=int)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("index", parents=[common], help="validate an SKB and build vector indices")
    p.add_argument("--skb", required=True, help="directory with schema.json, nodes.jsonl, edges.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--embedder", help="hash:DIM (default hash:256)")
    p.add_argument("--doc-max-len", type=int)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("plan", parents=[common], help="generate plans for a query file")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    _planner_flags(p)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("retrieve", parents=[common], help="stage 1: plan, match and rescore")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True, help="run file")
    p.add_argument("--meta", required=True, help="per-query metadata sidecar (JSONL)")
    p.add_argument("--diagnostics", help="optional JSONL of per-query diagnostics")
    _planner_flags(p)
    _stage1_flags(p)
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("fuse", parents=[common], help="stage 2: fuse graph and dense runs")
    p.add_argument("--graph-run", required=True)
    p.add_argument("--dense-run", required=True)
    p.add_argument("--meta")
    p.add_argument("--out", required=True)
    _fusion_flags(p)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("tune", parents=[common], help="grid-search fusion settings on validation data")
    p.add_argument("--graph-run", required=True)
    p.add_argument("--dense-run", required=True)
    p.add_argument("--meta")
    p.add_argument("--gold", required=True)
    p.add_argument("--mode", choices=("static", "dynamic"), default="static")
    p.add_argument("--grid", help="grid JSON; defaults to the built-in grids")
    p.add_argument("--out", default="-", help="best config JSON (default stdout)")
    p.add_argument("--report", help="TSV with every grid point")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("export-rerank-data", parents=[common], help="write listwise training records")
    p.add_argument("--index", required=True)
    p.add_argument("--run", required=True, help="fused stage-2 run")
    p.add_argument("--gold", required=True)
    p.add_argument("--queries")
    p.add_argument("--out", required=True)
    p.add_argument("--pool-size", type=int, default=100)
    p.add_argument("--neg-count", type=int, default=30)
    _caps_flags(p)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("rerank", parents=[common], help="stage 3: score the head and fuse again")
    p.add_argument("--index", required=True)
    p.add_argument("--run", required=True, help="fused stage-2 run")
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mock-scores", help="JSON object of content key -> probability")
    p.add_argument("--mock-responses")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--api-key-env")
    p.add_argument("--max-retries", type=int)
    p.add_argument("--pack", choices=pack_names())
    p.add_argument("--published", choices=sorted(PUBLISHED_RERANK_STATIC))
    p.add_argument("--w", type=float, help="weight of the reranker run")
    p.add_argument("--k", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--max-in-flight", type=int, default=8)
    _caps_flags(p)
    p.set_defaults(fn=cmd_rerank)

    p = sub.add_parser("eval", parents=[common], help="Hit@1, Hit@5, Recall@20, MRR")
    p.add_argument("--run", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--label", default="run")
    p.add_argument("--json", help="also write the table as JSON")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("serve", parents=[common], help="JSON retrieval endpoint")
    p.add_argument("--index", required=True)
    p.add_argument("--dense-run")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    _planner_flags(p)
    _stage1_flags(p)
    p.add_argument("--fusion")
    p.add_argument("--published", choices=sorted(PUBLISHED_STATIC))
    p.add_argument("--mode", choices=("static", "dynamic"), default="static")
    p.add_argument("--w", type=float)
    p.add_argument("--k", type=float)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load_config(args)
        return args.fn(args, cfg)
    except UsageError as exc:
        print(f"skbrank {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SkbLoadError as exc:
        for d in exc.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_DATA
    except (TransportError, EmbedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (ArtifactError, RunFormatError, PlanError, SkbError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
