"""
Reranking the fused head and exporting training groups
======================================================

Each of the top candidates is serialized to a compact document and scored
by a relevance model; here a token-overlap scorer stands in for the LLM.
The reranker run is fused again with the Stage-2 run. The same fused runs
give listwise training groups: one positive plus hard negatives.
"""

import numpy as np

from skbrank.evaluation import evaluate
from skbrank.fusion import PUBLISHED_RERANK_STATIC, PUBLISHED_STATIC, fuse_runs
from skbrank.llm import MockPlanner
from skbrank.execute import stage1
from skbrank.embed import HashEmbedder, build_index
from skbrank.rerank import LexicalScorer, build_record, listwise_loss, rerank_and_fuse, sample_group, serialize_candidate
from skbrank.synth import make_benchmark

bench = make_benchmark(seed=7, n_queries=20)
graph = bench.graph
embedder = HashEmbedder(256)
indices = {
    (lab, mode): build_index(graph, embedder, lab, mode) for lab in graph.schema.node_types for mode in ("name", "doc")
}
planner = MockPlanner(bench.plans)
results = {q: stage1(q, bench.queries[q], planner, graph, indices, embedder) for q in bench.queries}
fused = fuse_runs({q: r.ranking for q, r in results.items()}, bench.dense, PUBLISHED_STATIC["amazon"],
                  {q: r.meta for q, r in results.items()})

top = fused["q000"].ids[0]
print("serialized candidate:\n" + serialize_candidate(graph, top) + "\n")

final = {
    q: rerank_and_fuse(fused[q], bench.queries[q], LexicalScorer(), graph, PUBLISHED_RERANK_STATIC["amazon"], depth=50,
                       max_in_flight=1).ranking
    for q in fused
}
print(evaluate(fused, bench.gold).render("fused"), end="")
print(evaluate(final, bench.gold).render("final").splitlines()[1])

rng = np.random.default_rng(0)
record = build_record(fused["q003"], bench.gold["q003"], bench.queries["q003"])
group = sample_group(record, G=24, seed=rng)
print(f"\ngroup of {len(group.ids)}; positive at slot {group.pos_index}")
print(f"loss with uniform logits: {listwise_loss(np.zeros(len(group.ids)), group.pos_index):.5f}"
      f" (ln {len(group.ids)} = {np.log(len(group.ids)):.5f})")
