"""
Choosing fusion weights on validation queries
=============================================

Exhaustive grid search over (w, k) for static RRF, picking the best Hit@1
with Recall@20 as the tie-breaker, then a reduced dynamic grid.
"""

import io
import sys
import tempfile
from pathlib import Path

from skbrank.fusion import DynamicGrid, ValQuery, grid_search
from skbrank.llm import MockPlanner
from skbrank.pipeline import PipelineSettings, build_artifacts, load_artifacts, run_stage1
from skbrank.synth import make_benchmark, write_benchmark

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="skbrank-"))
bench = make_benchmark(seed=11, n_queries=30)
paths = write_benchmark(bench, work / "data")
build_artifacts(paths["skb"], work / "art", PipelineSettings())
art = load_artifacts(work / "art")
stage1 = run_stage1(art, bench.queries, MockPlanner(bench.plans))

val = [ValQuery(stage1[q].ranking, bench.dense[q], stage1[q].meta, bench.gold[q]) for q in bench.gold]
best, report = grid_search(val, "static")
print(f"static: {len(report)} points, best {best.to_dict()}")
print(f"  Hit@1 {report.hit1[report.best_index]:.1f}  R@20 {report.recall20[report.best_index]:.1f}")

buf = io.StringIO()
report.write_tsv(buf)
print("  first rows of the report:")
for line in buf.getvalue().splitlines()[:4]:
    print("   ", line)

small = DynamicGrid(
    k=(5, 60),
    w_bucket=((1.0, 2.0), (0.8, 1.4), (0.2, 0.8), (0.0,), (0.0,)),
    m_risk=((0.0,), (0.5, 1.0), (0.75, 1.25), (1.0,)),
)
best, report = grid_search(val, "dynamic", small)
print(f"dynamic: {len(report)} points, best {best.to_dict()}")
