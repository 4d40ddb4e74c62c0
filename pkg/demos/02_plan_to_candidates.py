"""
From a planner's JSON to ranked candidates
==========================================

One few-shot plan from the product prompt pack, run against a ten-node
graph: link the anchor, match the pattern, print the equivalent Cypher and
rescore the candidates against the residual relevance text.
"""

import json

from skbrank.embed import HashEmbedder, build_index
from skbrank.execute import compile_plan, emit_cypher, execute, stage1
from skbrank.llm import assemble_prompt, load_pack
from skbrank.plan import PlanError, parse_plan
from skbrank.skb import SkbEdge, SkbGraph, SkbNode, SkbSchema

schema = SkbSchema.from_dict(
    {
        "node_types": ["product", "brand"],
        "relation_types": ["HAS_BRAND", "ALSO_VIEW"],
        "endpoint_constraints": {"HAS_BRAND": [["product", "brand"]], "ALSO_VIEW": [["product", "product"]]},
        "text_fields": {"product": ["name", "details"], "brand": ["name"]},
    }
)
graph = SkbGraph(
    schema,
    [
        SkbNode("b1", "brand", {"name": "Sony"}),
        SkbNode("b2", "brand", {"name": "Bose"}),
        SkbNode("p1", "product", {"name": "Sony WH-1000XM5 headphones", "details": "30 hours of battery life"}),
        SkbNode("p2", "product", {"name": "Sony Bravia television", "details": "4k smart tv"}),
        SkbNode("p3", "product", {"name": "Bose QuietComfort headphones", "details": "24 hours of battery life"}),
        SkbNode("p4", "product", {"name": "Sony portable speaker", "details": "12 hours of battery"}),
    ],
    [
        SkbEdge("p1", "HAS_BRAND", "b1"),
        SkbEdge("p2", "HAS_BRAND", "b1"),
        SkbEdge("p4", "HAS_BRAND", "b1"),
        SkbEdge("p3", "HAS_BRAND", "b2"),
        SkbEdge("p1", "ALSO_VIEW", "p3"),
    ],
)
embedder = HashEmbedder(256)
indices = {(lab, mode): build_index(graph, embedder, lab, mode) for lab in schema.node_types for mode in ("name", "doc")}

# The prompt a planner would receive for this query.
pack = load_pack("amazon")
system, user = assemble_prompt(pack, "Find Sony headphones with at least 30 hours of battery life")
print(f"system prompt: {len(system)} chars; user turn ends with:\n  ...{user[-120:]!r}\n")

plan_text = json.dumps(
    {
        "retrieval_mode": "graph_filter_doc",
        "anchors": [{"var": "A1", "text": "Sony", "label": "brand", "match_mode": "name"}],
        "hops": [{"from": "A1", "rel": "HAS_BRAND", "to_var": "T", "to_label": "product"}],
        "target": {"var": "T", "labels": ["product"], "relevance_text": "headphones with 30 hours of battery life"},
        "risk_level": "normal",
    }
)
plan = parse_plan(plan_text, schema)
ir = compile_plan(plan, graph, indices, embedder)
print("anchor bindings:", {v: [(b.node, round(b.score, 3)) for b in bs] for v, bs in ir.bindings.items()})
print("\nequivalent Cypher:\n" + emit_cypher(ir))
print("anchor scores:", dict(execute(ir, graph).rows))

res = stage1("q1", "sony headphones", lambda qid, q: plan_text, graph, indices, embedder)
print("\nafter dense rescoring:")
for rank, (nid, score) in enumerate(res.ranking, start=1):
    print(f"  {rank}. {nid} {graph.name(nid):32s} {score:.4f}")
print("meta:", res.meta)

# A plan that breaks the schema is rejected with located diagnostics.
broken = json.loads(plan_text)
broken["hops"][0]["rel"] = "ALSO_VIEW"
try:
    parse_plan(json.dumps(broken), schema)
except PlanError as exc:
    print("\nrejected:", [str(d) for d in exc.diagnostics])
