"""Stage 3: candidate documents, listwise training records, scoring and final fusion.

A candidate document is a block of ``[key] value`` lines::

    [Type] <label>
    [<field>] <value truncated to max_text_field_tokens>
    [<relation>] name1; name2; ...

Relation lines follow schema declaration order and list up to
``max_neighbors_per_relation`` neighbor names, taken in ascending neighbor id.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Mapping, Protocol, Sequence

import numpy as np

from .embed import truncate_tokens
from .fusion import StaticRrfConfig, rrf_static
from .ranking import RankedList
from .skb import SkbGraph

__all__ = [
    "SerializationCaps",
    "RerankRecord",
    "ListwiseGroup",
    "Scorer",
    "FunctionScorer",
    "TableScorer",
    "LexicalScorer",
    "serialize_candidate",
    "build_record",
    "sample_group",
    "listwise_loss",
    "rerank_and_fuse",
    "export_record",
    "write_records",
    "TRAINING_META",
]

log = logging.getLogger(__name__)

TRAINING_META = {
    "G": 24,
    "loss": "listwise_softmax",
    "suggested": {
        "lora_rank": 32,
        "lora_alpha": 64,
        "epochs": 2,
        "lr": 3e-5,
        "warmup": 0.05,
        "batch": 16,
    },
}


@dataclass(frozen=True)
class SerializationCaps:
    max_text_field_tokens: int = 300
    max_neighbors_per_relation: int = 10
    # Per-label field override; default is the schema's text_fields.
    text_fields: Mapping[str, tuple[str, ...]] | None = None
    # "spaced": HAS_BRAND -> "HAS BRAND"; "raw": relation name verbatim.
    relation_style: str = "spaced"

    def __post_init__(self):
        if self.max_text_field_tokens < 1 or self.max_neighbors_per_relation < 1:
            raise ValueError("caps must be positive")
        if self.relation_style not in ("spaced", "raw"):
            raise ValueError(f"unknown relation_style {self.relation_style!r}")


def _relation_header(rel: str, style: str) -> str:
    return rel.replace("_", " ") if style == "spaced" else rel


def serialize_candidate(graph: SkbGraph, node_id: str, caps: SerializationCaps = SerializationCaps()) -> str:
    node = graph.node(node_id)
    fields = graph.schema.fields_of(node.label)
    if caps.text_fields is not None and node.label in caps.text_fields:
        fields = caps.text_fields[node.label]
    lines = [f"[Type] {node.label}"]
    for f in fields:
        value = truncate_tokens(node.text(f), caps.max_text_field_tokens)
        lines.append(f"[{f}] {value}".rstrip())
    per_rel = graph.relations_of(node_id)
    for rel in graph.schema.relation_types:
        ids = per_rel.get(rel, ())
        if not ids:
            continue
        names = [graph.name(n) or n for n in ids[: caps.max_neighbors_per_relation]]
        lines.append(f"[{_relation_header(rel, caps.relation_style)}] " + "; ".join(names))
    return "\n".join(lines)


@dataclass(frozen=True)
class RerankRecord:
    qid: str
    query: str
    pool: tuple[str, ...]
    positives: tuple[str, ...]
    hard_negatives: tuple[str, ...]

    @property
    def usable(self) -> bool:
        """Trainable only with at least one positive and one negative in the pool."""
        return bool(self.positives) and bool(self.hard_negatives)


def build_record(
    fused: RankedList,
    gold: Sequence[str] | frozenset[str],
    query: str = "",
    pool_size: int = 100,
    neg_count: int = 30,
) -> RerankRecord:
    gold = set(gold)
    pool = tuple(fused.ids[:pool_size])
    positives = tuple(n for n in pool if n in gold)
    negatives = tuple(n for n in pool if n not in gold)[:neg_count]
    return RerankRecord(fused.qid, query, pool, positives, negatives)


@dataclass(frozen=True)
class ListwiseGroup:
    ids: tuple[str, ...]
    pos_index: int

    def __post_init__(self):
        if not 0 <= self.pos_index < len(self.ids):
            raise ValueError("pos_index out of range")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("group members must be distinct")


def sample_group(record: RerankRecord, G: int = 24, seed=None) -> ListwiseGroup:
    """One uniform positive plus up to ``G - 1`` uniform hard negatives, shuffled.

    ``seed`` may be an int or a ``numpy.random.Generator``. With fewer than
    ``G - 1`` negatives stored, all of them are used and the group shrinks.
    """
    if not record.usable:
        raise ValueError(f"{record.qid}: record needs a positive and a negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pos = record.positives[int(rng.integers(len(record.positives)))]
    n_neg = min(G - 1, len(record.hard_negatives))
    picks = rng.choice(len(record.hard_negatives), size=n_neg, replace=False)
    negs = [record.hard_negatives[int(i)] for i in picks]
    pos_index = int(rng.integers(n_neg + 1))
    negs.insert(pos_index, pos)
    return ListwiseGroup(tuple(negs), pos_index)


def listwise_loss(logits, pos_index: int) -> float:
    """Cross-entropy of the positive's position under a softmax over the group."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= pos_index < z.size:
        raise ValueError("pos_index out of range")
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[pos_index])


class Scorer(Protocol):
    def score(self, query: str, document: str, system_instruction: str = "") -> float:
        """Relevance probability in [0, 1]."""


class FunctionScorer:
    def __init__(self, fn):
        self.fn = fn

    def score(self, query: str, document: str, system_instruction: str = "") -> float:
        return float(self.fn(query, document))


def content_key(*parts: str) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class TableScorer:
    """Fixed table keyed by ``content_key(query, document)``."""

    def __init__(self, table: Mapping[str, float], default: float = 0.0):
        self.table = dict(table)
        self.default = default

    def score(self, query: str, document: str, system_instruction: str = "") -> float:
        return self.table.get(content_key(query, document), self.default)


class LexicalScorer:
    """Deterministic offline stand-in: share of query tokens found in the document."""

    def score(self, query: str, document: str, system_instruction: str = "") -> float:
        q = {t.strip(".,;:!?()[]\"'").lower() for t in query.split()}
        q.discard("")
        if not q:
            return 0.0
        d = {t.strip(".,;:!?()[]\"'").lower() for t in document.split()}
        return len(q & d) / len(q)


@dataclass
class RerankResult:
    ranking: RankedList
    reranker_run: RankedList
    diagnostics: list[str] = field(default_factory=list)


def rerank_and_fuse(
    fused: RankedList,
    query: str,
    scorer: Scorer,
    graph: SkbGraph,
    cfg: StaticRrfConfig,
    caps: SerializationCaps = SerializationCaps(),
    depth: int = 100,
    system_instruction: str = "",
    retries: int = 2,
    max_in_flight: int = 8,
) -> RerankResult:
    """Score the top ``depth`` candidates and fuse with the full Stage-2 run.

    ``cfg.w`` weights the reranker run; candidates below ``depth`` keep only
    their Stage-2 term. A candidate whose scoring keeps failing gets 0.
    """
    head = fused.ids[:depth]
    docs = {nid: serialize_candidate(graph, nid, caps) for nid in head}
    diags: list[str] = []

    def one(nid: str) -> float:
        last = None
        for _ in range(retries + 1):
            try:
                p = float(scorer.score(query, docs[nid], system_instruction))
                if not 0.0 <= p <= 1.0 or math.isnan(p):
                    raise ValueError(f"score {p} outside [0, 1]")
                return p
            except Exception as exc:
                last = exc
        diags.append(f"{fused.qid}/{nid}: scoring failed ({last}); scored 0")
        return 0.0

    if max_in_flight > 1 and len(head) > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            probs = dict(zip(head, pool.map(one, head)))
    else:
        probs = {nid: one(nid) for nid in head}
    rr_run = RankedList.from_scores(fused.qid, probs, "reranker")
    final = rrf_static(rr_run, fused, cfg).retag("final")
    diags.sort()
    return RerankResult(final, rr_run, diags)


def export_record(
    record: RerankRecord, graph: SkbGraph, caps: SerializationCaps = SerializationCaps()
) -> dict:
    return {
        "qid": record.qid,
        "query": record.query,
        "pool": list(record.pool),
        "positives": list(record.positives),
        "hard_negatives": list(record.hard_negatives),
        "usable": record.usable,
        "documents": {nid: serialize_candidate(graph, nid, caps) for nid in record.pool},
        "training_meta": TRAINING_META,
    }


def write_records(
    out: IO[str] | str | os.PathLike,
    records: Sequence[RerankRecord],
    graph: SkbGraph,
    caps: SerializationCaps = SerializationCaps(),
) -> None:
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", encoding="utf-8") as fh:
            write_records(fh, records, graph, caps)
        return
    for rec in records:
        out.write(json.dumps(export_record(rec, graph, caps), ensure_ascii=False) + "\n")
