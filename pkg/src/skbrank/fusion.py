"""Stage 2: weighted reciprocal rank fusion of a graph run with a dense run.

Static RRF uses one graph weight ``w`` for every query::

    score(c) = w / (k + rank_g(c)) + (1 - w) / (k + rank_m(c))

Dynamic RRF computes the graph weight per query from its Stage-1 metadata,
``w_bucket[bucket(n_cand)] * m_risk[risk_level]``, and keeps the dense weight
at 1. Ranks are 1-based. A candidate missing from one run gets no term from
it, and a branch whose weight is 0 is dropped entirely, so ``w = 0`` returns
the dense run and ``w = 1`` the graph run.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .evaluation import hit_at_k, recall_at_k
from .ranking import RISK_LEVELS, QueryMeta, RankedList

__all__ = [
    "BUCKET_BOUNDS",
    "StaticRrfConfig",
    "DynamicRrfConfig",
    "QueryMeta",
    "PUBLISHED_DYNAMIC",
    "PUBLISHED_STATIC",
    "PUBLISHED_RERANK_STATIC",
    "bucket_of",
    "dynamic_weight",
    "weighted_rrf",
    "rrf_static",
    "rrf_dynamic",
    "fuse_runs",
    "load_fusion_config",
    "ValQuery",
    "StaticGrid",
    "DynamicGrid",
    "GridReport",
    "grid_search",
    "load_grid",
]

# Upper bounds of the first four n_cand buckets; anything larger is bucket 4.
BUCKET_BOUNDS = (10, 50, 100, 500)


@dataclass(frozen=True)
class StaticRrfConfig:
    w: float
    k: float

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"w must lie in [0, 1], got {self.w}")
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")

    def to_dict(self) -> dict:
        return {"mode": "static", "w": self.w, "k": self.k}


@dataclass(frozen=True)
class DynamicRrfConfig:
    k: float
    w_bucket: tuple[float, ...]
    m_risk: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "w_bucket", tuple(float(x) for x in self.w_bucket))
        object.__setattr__(self, "m_risk", tuple(float(x) for x in self.m_risk))
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if len(self.w_bucket) != 5:
            raise ValueError("w_bucket needs 5 entries: [1,10], [11,50], [51,100], [101,500], >500")
        if len(self.m_risk) != 4:
            raise ValueError("m_risk needs 4 entries: no_trade, weak, normal, aggressive")
        if min(self.w_bucket + self.m_risk) < 0:
            raise ValueError("weights must be non-negative")

    def to_dict(self) -> dict:
        return {
            "mode": "dynamic",
            "k": self.k,
            "w_bucket": list(self.w_bucket),
            "m_risk": list(self.m_risk),
        }


PUBLISHED_DYNAMIC = {
    "amazon": DynamicRrfConfig(5, (1.0, 1.4, 0.8, 0.0, 0.0), (0.0, 0.5, 0.75, 1.0)),
    "mag": DynamicRrfConfig(300, (1.4, 0.8, 0.6, 0.1, 0.05), (0.0, 1.25, 0.75, 1.0)),
    "prime": DynamicRrfConfig(300, (2.0, 0.8, 0.2, 0.05, 0.05), (0.5, 0.5, 1.25, 1.0)),
}
# Graph + dense fusion, static variant, best validation point per dataset.
PUBLISHED_STATIC = {
    "amazon": StaticRrfConfig(0.35, 5),
    "mag": StaticRrfConfig(0.50, 2),
    "prime": StaticRrfConfig(0.50, 10),
}
# Reranker + Stage-2 fusion; w weights the reranker run.
PUBLISHED_RERANK_STATIC = {
    "amazon": StaticRrfConfig(0.65, 2),
    "mag": StaticRrfConfig(0.50, 5),
    "prime": StaticRrfConfig(0.50, 2),
}


def bucket_of(n_cand: int) -> int | None:
    """0..4 for n_cand in [1,10], [11,50], [51,100], [101,500], >500; None when empty."""
    if n_cand < 0:
        raise ValueError("n_cand must be >= 0")
    if n_cand == 0:
        return None
    for i, bound in enumerate(BUCKET_BOUNDS):
        if n_cand <= bound:
            return i
    return len(BUCKET_BOUNDS)


def dynamic_weight(meta: QueryMeta, cfg: DynamicRrfConfig) -> float:
    b = bucket_of(meta.n_cand)
    if not meta.valid or b is None:
        return 0.0
    return cfg.w_bucket[b] * cfg.m_risk[RISK_LEVELS.index(meta.risk_level)]


def weighted_rrf(
    run_a: RankedList, run_b: RankedList, w_a: float, w_b: float, k: float, tag: str = "fused"
) -> RankedList:
    """``w_a / (k + rank_a) + w_b / (k + rank_b)``; a zero-weight run contributes nothing."""
    if run_a.qid != run_b.qid:
        raise ValueError(f"qid mismatch: {run_a.qid!r} vs {run_b.qid!r}")
    qid = run_a.qid
    scores: dict[str, float] = {}
    for run, weight in ((run_a, w_a), (run_b, w_b)):
        if weight == 0:
            continue
        for rank, (nid, _) in enumerate(run.items, start=1):
            scores[nid] = scores.get(nid, 0.0) + weight / (k + rank)
    return RankedList.from_scores(qid, scores, tag)


def rrf_static(run_g: RankedList, run_m: RankedList, cfg: StaticRrfConfig) -> RankedList:
    return weighted_rrf(run_g, run_m, cfg.w, 1.0 - cfg.w, cfg.k, "static_rrf")


def rrf_dynamic(
    run_g: RankedList, run_m: RankedList, meta: QueryMeta, cfg: DynamicRrfConfig
) -> RankedList:
    return weighted_rrf(run_g, run_m, dynamic_weight(meta, cfg), 1.0, cfg.k, "dynamic_rrf")


def fuse_runs(
    runs_g: Mapping[str, RankedList],
    runs_m: Mapping[str, RankedList],
    config: StaticRrfConfig | DynamicRrfConfig,
    metas: Mapping[str, QueryMeta] | None = None,
) -> dict[str, RankedList]:
    """Fuse every qid present in either input; a missing run counts as empty."""
    out = {}
    for qid in sorted(set(runs_g) | set(runs_m)):
        g = runs_g.get(qid, RankedList(qid))
        m = runs_m.get(qid, RankedList(qid))
        if isinstance(config, StaticRrfConfig):
            out[qid] = rrf_static(g, m, config)
        else:
            meta = (metas or {}).get(qid, QueryMeta())
            out[qid] = rrf_dynamic(g, m, meta, config)
    return out


def config_from_dict(doc: Mapping) -> StaticRrfConfig | DynamicRrfConfig:
    mode = doc.get("mode", "dynamic" if "w_bucket" in doc else "static")
    if mode == "static":
        return StaticRrfConfig(float(doc["w"]), float(doc["k"]))
    if mode == "dynamic":
        return DynamicRrfConfig(float(doc["k"]), tuple(doc["w_bucket"]), tuple(doc["m_risk"]))
    raise ValueError(f"unknown fusion mode {mode!r}")


def load_fusion_config(source) -> StaticRrfConfig | DynamicRrfConfig:
    """Read ``{"mode", "w", "k"}`` or ``{"mode", "k", "w_bucket", "m_risk"}``."""
    if isinstance(source, Mapping):
        return config_from_dict(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return config_from_dict(json.load(fh))
    return config_from_dict(json.load(source))


@dataclass(frozen=True)
class ValQuery:
    run_g: RankedList
    run_m: RankedList
    meta: QueryMeta
    gold: frozenset[str]


@dataclass(frozen=True)
class StaticGrid:
    w: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(21))
    k: tuple[float, ...] = (1, 2, 5, 10, 20, 40, 60, 80, 100)


@dataclass(frozen=True)
class DynamicGrid:
    k: tuple[float, ...] = (5, 10, 20, 40, 80, 150, 300)
    w_bucket: tuple[tuple[float, ...], ...] = (
        (1.0, 1.2, 1.4, 1.6, 2.0),
        (0.8, 1.0, 1.2, 1.4),
        (0.2, 0.4, 0.6, 0.8),
        (0.0, 0.05, 0.1),
        (0.0, 0.05, 0.1),
    )
    m_risk: tuple[tuple[float, ...], ...] = (
        (0.0, 0.25, 0.5, 0.75),
        (0.5, 0.75, 1.0, 1.25),
        (0.75, 1.0, 1.25, 1.5),
        (1.0, 1.25, 1.5, 2.0),
    )

    def __post_init__(self):
        if len(self.w_bucket) != 5 or len(self.m_risk) != 4:
            raise ValueError("dynamic grid needs 5 w_bucket axes and 4 m_risk axes")


def load_grid(source) -> dict[str, StaticGrid | DynamicGrid]:
    """Grid file: ``{"static": {"w": [...], "k": [...]}, "dynamic": {"k", "w_bucket", "m_risk"}}``."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            doc = json.load(fh)
    elif isinstance(source, Mapping):
        doc = source
    else:
        doc = json.load(source)
    grids: dict[str, StaticGrid | DynamicGrid] = {}
    if "static" in doc:
        s = doc["static"]
        grids["static"] = StaticGrid(tuple(s["w"]), tuple(s["k"]))
    if "dynamic" in doc:
        d = doc["dynamic"]
        grids["dynamic"] = DynamicGrid(
            tuple(d["k"]),
            tuple(tuple(a) for a in d["w_bucket"]),
            tuple(tuple(a) for a in d["m_risk"]),
        )
    return grids


@dataclass
class GridReport:
    """Macro Hit@1 and Recall@20 (percent) for every grid point.

    ``axes`` holds the sorted values along each parameter axis; ``hit1`` and
    ``recall20`` are arrays shaped by the axis lengths (C order follows the
    lexicographic order of parameter tuples).
    """

    mode: str
    names: tuple[str, ...]
    axes: tuple[tuple[float, ...], ...]
    hit1: np.ndarray
    recall20: np.ndarray
    n_queries: int
    best_index: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return int(self.hit1.size)

    def params_at(self, index: tuple[int, ...]) -> tuple[float, ...]:
        return tuple(self.axes[a][i] for a, i in enumerate(index))

    def rows(self) -> Iterable[tuple[tuple[float, ...], float, float]]:
        for index in np.ndindex(self.hit1.shape):
            yield self.params_at(index), float(self.hit1[index]), float(self.recall20[index])

    @property
    def best_params(self) -> tuple[float, ...]:
        return self.params_at(self.best_index)

    def write_tsv(self, out: IO[str]) -> None:
        out.write("\t".join(self.names + ("hit@1", "recall@20")) + "\n")
        for params, h, r in self.rows():
            cells = [repr(p) for p in params] + [f"{h:.6f}", f"{r:.6f}"]
            out.write("\t".join(cells) + "\n")


def _metrics(run: RankedList, gold: frozenset[str]) -> tuple[int, float]:
    return hit_at_k(run, gold, 1), recall_at_k(run, gold, 20)


def _pick(hit: np.ndarray, recall: np.ndarray) -> tuple[int, ...]:
    # Higher Hit@1, then higher Recall@20, then the lexicographically smallest tuple.
    h = np.round(hit, 9)
    r = np.round(recall, 9)
    cand = h == h.max()
    r_masked = np.where(cand, r, -np.inf)
    cand &= r_masked == r_masked.max()
    flat = int(np.argmax(cand.ravel()))
    return tuple(int(i) for i in np.unravel_index(flat, hit.shape))


def _static_search(val: Sequence[ValQuery], grid: StaticGrid) -> GridReport:
    ws, ks = tuple(sorted(set(grid.w))), tuple(sorted(set(grid.k)))
    hit = np.zeros((len(ws), len(ks)))
    rec = np.zeros((len(ws), len(ks)))
    for i, w in enumerate(ws):
        for j, k in enumerate(ks):
            cfg = StaticRrfConfig(w, k)
            for q in val:
                h, r = _metrics(rrf_static(q.run_g, q.run_m, cfg), q.gold)
                hit[i, j] += h
                rec[i, j] += r
    n = len(val)
    hit, rec = 100.0 * hit / n, 100.0 * rec / n
    return GridReport("static", ("w", "k"), (ws, ks), hit, rec, n, _pick(hit, rec))


def _dynamic_search(val: Sequence[ValQuery], grid: DynamicGrid) -> GridReport:
    """Exhaustive dynamic sweep evaluated through per-cell lookup tables.

    A query's graph weight depends only on its (bucket, risk) cell and on the
    two axis values chosen for that cell, so each query is fused once per
    (k, bucket value, risk value) and grid points are scored by summing the
    per-cell tables with broadcasting.
    """
    ks = tuple(sorted(set(grid.k)))
    wb_axes = tuple(tuple(sorted(set(a))) for a in grid.w_bucket)
    mr_axes = tuple(tuple(sorted(set(a))) for a in grid.m_risk)
    shape = (len(ks),) + tuple(len(a) for a in wb_axes) + tuple(len(a) for a in mr_axes)
    hit = np.zeros(shape)
    rec = np.zeros(shape)
    ndim = len(shape)

    cells: dict[tuple[int, int] | None, list[ValQuery]] = {}
    for q in val:
        b = bucket_of(q.meta.n_cand)
        cell = None if (not q.meta.valid or b is None) else (b, RISK_LEVELS.index(q.meta.risk_level))
        cells.setdefault(cell, []).append(q)

    for cell, queries in cells.items():
        if cell is None:
            table_h = np.zeros(len(ks))
            table_r = np.zeros(len(ks))
            for ki, k in enumerate(ks):
                for q in queries:
                    h, r = _metrics(weighted_rrf(q.run_g, q.run_m, 0.0, 1.0, k), q.gold)
                    table_h[ki] += h
                    table_r[ki] += r
            bshape = [1] * ndim
            bshape[0] = len(ks)
            hit += table_h.reshape(bshape)
            rec += table_r.reshape(bshape)
            continue
        b, r_i = cell
        wvals, mvals = wb_axes[b], mr_axes[r_i]
        table_h = np.zeros((len(ks), len(wvals), len(mvals)))
        table_r = np.zeros_like(table_h)
        for ki, k in enumerate(ks):
            cache: dict[float, tuple[float, float]] = {}
            for wi, wv in enumerate(wvals):
                for mi, mv in enumerate(mvals):
                    weight = wv * mv
                    if weight not in cache:
                        sh = sr = 0.0
                        for q in queries:
                            h, r = _metrics(weighted_rrf(q.run_g, q.run_m, weight, 1.0, k), q.gold)
                            sh += h
                            sr += r
                        cache[weight] = (sh, sr)
                    table_h[ki, wi, mi], table_r[ki, wi, mi] = cache[weight]
        bshape = [1] * ndim
        bshape[0], bshape[1 + b], bshape[6 + r_i] = table_h.shape
        hit += table_h.reshape(bshape)
        rec += table_r.reshape(bshape)

    n = len(val)
    hit, rec = 100.0 * hit / n, 100.0 * rec / n
    names = ("k",) + tuple(f"w_bucket[{i}]" for i in range(5)) + tuple(
        f"m_risk[{r}]" for r in RISK_LEVELS
    )
    return GridReport("dynamic", names, (ks,) + wb_axes + mr_axes, hit, rec, n, _pick(hit, rec))


def grid_search(
    val: Sequence[ValQuery], mode: str, grid: StaticGrid | DynamicGrid | None = None
) -> tuple[StaticRrfConfig | DynamicRrfConfig, GridReport]:
    """Exhaustively score every grid point by validation Hit@1 and return the best.

    Ties go to higher Recall@20, then to the lexicographically smaller
    parameter tuple ((w, k) for static; (k, w_bucket..., m_risk...) for dynamic).
    """
    if not val:
        raise ValueError("validation set is empty")
    if mode == "static":
        grid = grid or StaticGrid()
        if not grid.w or not grid.k:
            raise ValueError("empty grid")
        report = _static_search(val, grid)
        w, k = report.best_params
        return StaticRrfConfig(w, k), report
    if mode == "dynamic":
        grid = grid or DynamicGrid()
        if not grid.k or not all(grid.w_bucket) or not all(grid.m_risk):
            raise ValueError("empty grid")
        report = _dynamic_search(val, grid)
        p = report.best_params
        return DynamicRrfConfig(p[0], p[1:6], p[6:10]), report
    raise ValueError(f"unknown mode {mode!r}")


def grid_points(grid: StaticGrid | DynamicGrid) -> Iterable[tuple[float, ...]]:
    if isinstance(grid, StaticGrid):
        return itertools.product(grid.w, grid.k)
    return itertools.product(grid.k, *grid.w_bucket, *grid.m_risk)
