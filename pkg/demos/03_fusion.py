"""
Graph branch, dense branch, and their fusion
============================================

The synthetic benchmark is built so each query has one answer the graph
branch finds (brand-linked) and one only the dense run ranks well. Fusion
recovers both. Static RRF uses one weight for every query; dynamic RRF
scales the graph weight by candidate count and the planner's risk level.
"""

import sys
import tempfile
from pathlib import Path

from skbrank.fusion import PUBLISHED_DYNAMIC, PUBLISHED_STATIC, bucket_of, dynamic_weight, fuse_runs
from skbrank.llm import MockPlanner
from skbrank.evaluation import evaluate
from skbrank.pipeline import PipelineSettings, build_artifacts, load_artifacts, run_stage1
from skbrank.synth import make_benchmark, write_benchmark

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="skbrank-"))
bench = make_benchmark(seed=7)
paths = write_benchmark(bench, work / "data")
build_artifacts(paths["skb"], work / "art", PipelineSettings())
art = load_artifacts(work / "art")

stage1 = run_stage1(art, bench.queries, MockPlanner(bench.plans))
graph_runs = {q: r.ranking for q, r in stage1.items()}
metas = {q: r.meta for q, r in stage1.items()}

print(evaluate(graph_runs, bench.gold).render("graph"), end="")
print(evaluate(bench.dense, bench.gold).render("dense").splitlines()[1])
for name, cfg in (("static", PUBLISHED_STATIC["amazon"]), ("dynamic", PUBLISHED_DYNAMIC["amazon"])):
    fused = fuse_runs(graph_runs, bench.dense, cfg, metas)
    print(evaluate(fused, bench.gold).render(name).splitlines()[1])

# The per-query graph weight under the dynamic configuration.
cfg = PUBLISHED_DYNAMIC["amazon"]
print("\nqid   n_cand bucket risk        weight")
for qid in sorted(metas)[:4] + sorted(metas)[-2:]:
    m = metas[qid]
    print(f"{qid}  {m.n_cand:6d} {str(bucket_of(m.n_cand)):6s} {m.risk_level:11s} {dynamic_weight(m, cfg):.3f}")
