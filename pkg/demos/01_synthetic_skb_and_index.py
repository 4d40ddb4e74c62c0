"""
Build a synthetic product graph and index it
============================================

A seeded 1000-node product graph with brands, categories and colors, plus
50 queries, gold answers, planner fixtures and a dense run. The index step
validates the graph and embeds every (label, mode) pair.

Usage: python3 demos/01_synthetic_skb_and_index.py [WORKDIR]
"""

import json
import sys
import tempfile
from pathlib import Path

from skbrank.pipeline import PipelineSettings, build_artifacts, load_artifacts
from skbrank.synth import make_benchmark, write_benchmark

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="skbrank-"))

bench = make_benchmark(seed=7)
print(json.dumps(bench.counts(), indent=2))

paths = write_benchmark(bench, work / "data")
manifest = build_artifacts(paths["skb"], work / "art", PipelineSettings())
print("config hash:", manifest["config_hash"])
for entry in manifest["indices"]:
    print(f"  {entry['path']:32s} {entry['size']:5d} vectors")

# Loading re-checks every file against the manifest checksums.
art = load_artifacts(work / "art")
print("loaded", len(art.indices), "indices; embedder", art.embedder.tag)
print("workdir:", work)
