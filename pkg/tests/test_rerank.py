from __future__ import annotations

import io
import json
import math

import numpy as np
import pytest

import fixtures
import oracles
from skbrank.fusion import StaticRrfConfig
from skbrank.ranking import RankedList
from skbrank.rerank import (
    FunctionScorer,
    LexicalScorer,
    RerankRecord,
    SerializationCaps,
    TableScorer,
    build_record,
    content_key,
    listwise_loss,
    rerank_and_fuse,
    sample_group,
    serialize_candidate,
    write_records,
)


def test_serialization_caps_apply():
    graph = fixtures.sony_graph()
    text = serialize_candidate(graph, "p1", SerializationCaps(max_text_field_tokens=2, max_neighbors_per_relation=1))
    assert text.splitlines() == [
        "[Type] product",
        "[name] Sony WH-1000XM5",
        "[details] noise cancelling",
        "[HAS BRAND] Sony",
        "[HAS CATEGORY] headphones",
        "[HAS COLOR] black",
        "[ALSO BUY] Sony portable speaker",
        "[ALSO VIEW] Bose QuietComfort headphones",
    ]


def test_serialization_is_independent_of_insertion_order():
    graph, node, caps = fixtures.prime_node()
    again = type(graph)(graph.schema, reversed(list(graph.nodes.values())), reversed(graph.edges))
    assert serialize_candidate(graph, node, caps) == serialize_candidate(again, node, caps)


def test_build_record_and_sampling():
    fused = RankedList.from_scores("q", {f"n{i:02d}": 100.0 - i for i in range(60)})
    rec = build_record(fused, {"n03", "n70"}, "query", pool_size=50, neg_count=30)
    assert rec.positives == ("n03",) and len(rec.hard_negatives) == 30
    assert "n03" not in rec.hard_negatives and rec.usable
    g1 = sample_group(rec, 24, seed=1)
    g2 = sample_group(rec, 24, seed=1)
    assert g1 == g2
    assert len(g1.ids) == 24 and g1.ids[g1.pos_index] == "n03"
    assert set(g1.ids) - {"n03"} <= set(rec.hard_negatives)
    small = RerankRecord("q", "", ("a", "b", "c"), ("a",), ("b", "c"))
    assert len(sample_group(small, 24, seed=0).ids) == 3
    with pytest.raises(ValueError):
        sample_group(RerankRecord("q", "", ("a",), ("a",), ()), 24)


def test_loss_is_stable_for_extreme_logits():
    z = np.array([1000.0, -1000.0, 0.0])
    assert listwise_loss(z, 0) == pytest.approx(0.0, abs=1e-12)
    assert math.isfinite(listwise_loss(z, 1))
    # ln(e + e^2 + e^0.5) - 2
    assert listwise_loss([1.0, 2.0, 0.5], 1) == pytest.approx(0.4643687841079447, abs=1e-12)
    assert listwise_loss([1.0, 2.0, 0.5], 1) == pytest.approx(oracles.naive_loss([1.0, 2.0, 0.5], 1), abs=1e-12)


def test_rerank_and_fuse_formula(sony):
    graph, *_ = sony
    fused = RankedList.from_scores("q", {"p2": 3.0, "p4": 2.0, "p1": 1.0, "p3": 0.5})
    probs = {"p1": 0.9, "p2": 0.1, "p4": 0.5}
    docs = {nid: serialize_candidate(graph, nid) for nid in probs}
    scorer = TableScorer({content_key("headphones", d): probs[n] for n, d in docs.items()})
    cfg = StaticRrfConfig(0.65, 2)
    res = rerank_and_fuse(fused, "headphones", scorer, graph, cfg, depth=3, max_in_flight=1)
    assert res.reranker_run.ids == ["p1", "p4", "p2"]
    want = oracles.naive_rrf(["p1", "p4", "p2"], ["p2", "p4", "p1", "p3"], 0.65, 0.35, 2)
    assert res.ranking.ids == oracles.naive_order(want)
    assert res.ranking.scores() == pytest.approx(want, abs=1e-12)
    assert res.ranking.tag == "final"


def test_failing_scorer_scores_zero_with_diagnostic(sony):
    graph, *_ = sony
    calls = []

    def flaky(q, d):
        calls.append(d)
        if "Bravia" in d:
            raise RuntimeError("timeout")
        return 2.0 if "Sonos" in d else 0.5

    fused = RankedList.from_scores("q", {"p2": 2.0, "p5": 1.0, "p1": 0.5})
    res = rerank_and_fuse(fused, "q", FunctionScorer(flaky), graph, StaticRrfConfig(0.5, 2), retries=2, max_in_flight=2)
    assert res.reranker_run.scores() == {"p1": 0.5, "p2": 0.0, "p5": 0.0}
    assert len(res.diagnostics) == 2
    assert sum("Bravia" in d for d in calls) == 3


def test_parallel_and_serial_scoring_agree(sony):
    graph, *_ = sony
    fused = RankedList.from_scores("q", {n: float(i) for i, n in enumerate(sorted(graph.nodes))})
    a = rerank_and_fuse(fused, "sony headphones", LexicalScorer(), graph, StaticRrfConfig(0.65, 2), max_in_flight=1)
    b = rerank_and_fuse(fused, "sony headphones", LexicalScorer(), graph, StaticRrfConfig(0.65, 2), max_in_flight=4)
    assert a.ranking == b.ranking


def test_write_records_jsonl(sony):
    graph, *_ = sony
    rec = build_record(RankedList.from_scores("q", {"p1": 2.0, "p2": 1.0}), {"p1"}, "x")
    buf = io.StringIO()
    write_records(buf, [rec], graph)
    doc = json.loads(buf.getvalue())
    assert doc["usable"] and doc["training_meta"]["G"] == 24
    assert doc["documents"]["p1"].startswith("[Type] product\n")
