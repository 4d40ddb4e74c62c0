"""Batch orchestration: index artifacts, Stage-1 batches, fusion, reranking, evaluation.

The command line is a thin layer over these functions, and the end-to-end
tests drive them directly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

from .embed import DEFAULT_DOC_MAX_LEN, Embedder, HashEmbedder, RemoteEmbedder, VectorIndex, build_index
from .evaluation import GoldSet, MetricsTable, evaluate
from .execute import DEFAULT_LINK_PARAMS, DEFAULT_MAX_ASSIGNMENTS, Planner, Stage1Result, stage1
from .fusion import DynamicRrfConfig, StaticRrfConfig, fuse_runs
from .ranking import QueryMeta, RankedList
from .rerank import SerializationCaps, Scorer, rerank_and_fuse
from .skb import SkbGraph, dump_skb_dir, load_skb_dir

__all__ = [
    "Artifacts",
    "PipelineSettings",
    "config_hash",
    "file_sha256",
    "make_embedder",
    "build_artifacts",
    "load_artifacts",
    "read_queries",
    "run_stage1",
    "run_rerank",
    "run_miniature",
    "provenance",
    "ArtifactError",
]

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(settings: Mapping) -> str:
    """Short hash of canonical JSON; what output headers record."""
    blob = json.dumps(settings, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def make_embedder(spec: Mapping | str) -> Embedder:
    """``"hash:256"`` or ``{"kind": "hash", "dim": 256}`` or a remote spec."""
    if isinstance(spec, str):
        kind, _, dim = spec.partition(":")
        spec = {"kind": kind, "dim": int(dim) if dim else 256}
    kind = spec.get("kind", "hash")
    if kind == "hash":
        return HashEmbedder(int(spec.get("dim", 256)))
    if kind == "remote":
        return RemoteEmbedder(
            spec["endpoint"],
            spec["model"],
            int(spec["dim"]),
            api_key_env=spec.get("api_key_env", "SKBRANK_API_KEY"),
        )
    raise ValueError(f"unknown embedder kind {kind!r}")


@dataclass
class PipelineSettings:
    """Everything that shapes outputs; hashed into every file the CLI writes."""

    embedder: dict = field(default_factory=lambda: {"kind": "hash", "dim": 256})
    doc_max_len: int = DEFAULT_DOC_MAX_LEN
    link_params: dict = field(default_factory=lambda: {m: list(v) for m, v in DEFAULT_LINK_PARAMS.items()})
    max_assignments: int = DEFAULT_MAX_ASSIGNMENTS
    seed: int = 0

    def link(self) -> dict[str, tuple[int, float]]:
        return {m: (int(k), float(t)) for m, (k, t) in self.link_params.items()}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Artifacts:
    graph: SkbGraph
    indices: dict[tuple[str, str], VectorIndex]
    embedder: Embedder
    manifest: dict


def _index_file(label: str, mode: str) -> str:
    return f"indices/{label}.{mode}.idx"


def build_artifacts(skb_dir, out_dir, settings: PipelineSettings = PipelineSettings()) -> dict:
    """Load and validate an SKB, embed every (label, mode) and write a manifest."""
    graph = load_skb_dir(skb_dir)
    embedder = make_embedder(settings.embedder)
    out = Path(out_dir)
    (out / "indices").mkdir(parents=True, exist_ok=True)
    dump_skb_dir(graph, out / "graph")
    files = ["graph/schema.json", "graph/nodes.jsonl", "graph/edges.jsonl"]
    indices = []
    for label in sorted(graph.schema.node_types):
        if not graph.schema.fields_of(label):
            continue
        for mode in ("name", "doc"):
            idx = build_index(graph, embedder, label, mode, settings.doc_max_len)
            rel = _index_file(label, mode)
            idx.save(out / rel)
            files.append(rel)
            indices.append({"label": label, "mode": mode, "path": rel, "size": len(idx)})
    manifest = {
        "graph": {"path": "graph", **graph.stats()},
        "indices": indices,
        "embedder": embedder.tag,
        "settings": settings.to_dict(),
        "config_hash": config_hash(settings.to_dict()),
        "seed": settings.seed,
        "checksums": {f: file_sha256(out / f) for f in files},
    }
    with open(out / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


class ArtifactError(ValueError):
    pass


def load_artifacts(index_dir, verify: bool = True) -> Artifacts:
    d = Path(index_dir)
    try:
        with open(d / MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ArtifactError(f"{d}: no {MANIFEST}; run the index command first") from None
    if verify:
        for rel, want in manifest["checksums"].items():
            if file_sha256(d / rel) != want:
                raise ArtifactError(f"{rel}: checksum mismatch with manifest")
    graph = load_skb_dir(d / "graph")
    embedder = make_embedder(manifest["settings"]["embedder"])
    indices = {}
    for entry in manifest["indices"]:
        idx = VectorIndex.load(d / entry["path"])
        if idx.embedder_tag != embedder.tag:
            raise ArtifactError(f"{entry['path']}: built with {idx.embedder_tag}, not {embedder.tag}")
        indices[(idx.label, idx.mode)] = idx
    return Artifacts(graph, indices, embedder, manifest)


def read_queries(path) -> dict[str, str]:
    """JSONL of ``{"qid", "query"}``; duplicates are an error."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            rec = json.loads(line)
            qid = str(rec["qid"])
            if qid in out:
                raise ValueError(f"{path} line {lineno}: duplicate qid {qid!r}")
            out[qid] = rec["query"]
    return out


def run_stage1(
    art: Artifacts,
    queries: Mapping[str, str],
    planner: Planner,
    settings: PipelineSettings = PipelineSettings(),
) -> dict[str, Stage1Result]:
    results = {}
    t0 = time.perf_counter()
    for qid in sorted(queries):
        results[qid] = stage1(
            qid,
            queries[qid],
            planner,
            art.graph,
            art.indices,
            art.embedder,
            settings.link(),
            settings.max_assignments,
        )
    log.info("stage 1: %d queries in %.2fs", len(results), time.perf_counter() - t0)
    return results


def run_rerank(
    art: Artifacts,
    fused: Mapping[str, RankedList],
    queries: Mapping[str, str],
    scorer: Scorer,
    cfg: StaticRrfConfig,
    caps: SerializationCaps = SerializationCaps(),
    depth: int = 100,
    system_instruction: str = "",
    max_in_flight: int = 8,
) -> tuple[dict[str, RankedList], dict[str, list[str]]]:
    out, diags = {}, {}
    for qid in sorted(fused):
        res = rerank_and_fuse(
            fused[qid],
            queries.get(qid, ""),
            scorer,
            art.graph,
            cfg,
            caps,
            depth,
            system_instruction,
            max_in_flight=max_in_flight,
        )
        out[qid] = res.ranking
        if res.diagnostics:
            diags[qid] = res.diagnostics
    return out, diags


@dataclass
class MiniatureResult:
    stage1: dict[str, RankedList]
    metas: dict[str, QueryMeta]
    fused: dict[str, RankedList]
    final: dict[str, RankedList]
    tables: dict[str, MetricsTable]


def run_miniature(
    art: Artifacts,
    queries: Mapping[str, str],
    planner: Planner,
    dense: Mapping[str, RankedList],
    gold: GoldSet,
    fusion: StaticRrfConfig | DynamicRrfConfig,
    scorer: Scorer,
    rerank_cfg: StaticRrfConfig,
    settings: PipelineSettings = PipelineSettings(),
    caps: SerializationCaps = SerializationCaps(),
    depth: int = 100,
) -> MiniatureResult:
    """retrieve -> fuse -> rerank -> eval, all in memory."""
    s1 = run_stage1(art, queries, planner, settings)
    runs_g = {q: r.ranking for q, r in s1.items()}
    metas = {q: r.meta for q, r in s1.items()}
    fused = fuse_runs(runs_g, dense, fusion, metas)
    final, _ = run_rerank(art, fused, queries, scorer, rerank_cfg, caps, depth, max_in_flight=1)
    tables = {
        "graph": evaluate(runs_g, gold),
        "dense": evaluate(dense, gold),
        "fused": evaluate(fused, gold),
        "final": evaluate(final, gold),
    }
    return MiniatureResult(runs_g, metas, fused, final, tables)


def provenance(doc: Mapping, seed: int) -> dict:
    return {"config_hash": config_hash(doc), "seed": seed}
