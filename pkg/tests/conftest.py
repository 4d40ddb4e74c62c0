from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import fixtures  # noqa: E402
from skbrank.embed import HashEmbedder  # noqa: E402
from skbrank.pipeline import PipelineSettings, build_artifacts, load_artifacts  # noqa: E402
from skbrank.synth import make_benchmark, write_benchmark  # noqa: E402


@pytest.fixture(scope="session")
def sony():
    graph = fixtures.sony_graph()
    embedder = HashEmbedder(256)
    return graph, fixtures.build_indices(graph, embedder), embedder


@pytest.fixture(scope="session")
def bench():
    return make_benchmark()


@pytest.fixture(scope="session")
def bench_dir(tmp_path_factory, bench):
    root = tmp_path_factory.mktemp("bench")
    paths = write_benchmark(bench, root / "data")
    build_artifacts(paths["skb"], root / "art", PipelineSettings())
    return root, paths


@pytest.fixture(scope="session")
def bench_art(bench_dir):
    return load_artifacts(bench_dir[0] / "art")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        status, title = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}")
