"""Seeded synthetic SKBs and a small benchmark where the two branches complement each other.

In the benchmark every query has two gold products:

* ``g1`` carries the query's brand and its descriptive words, so the graph
  branch (brand hop plus dense rescoring) puts it first, while the dense run
  buries it below rank 40;
* ``g2`` is an off-brand product the graph branch cannot reach, placed in the
  dense top 5.

So each branch alone finds half the gold and fusion can find both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import GoldSet, write_gold
from .ranking import RankedList, write_run
from .skb import SkbEdge, SkbGraph, SkbNode, SkbSchema, dump_skb_dir

__all__ = ["AMAZON_LIKE_SCHEMA", "Benchmark", "make_words", "random_graph", "make_benchmark", "write_benchmark"]

AMAZON_LIKE_SCHEMA = SkbSchema.from_dict(
    {
        "node_types": ["product", "brand", "category", "color"],
        "relation_types": ["HAS_BRAND", "HAS_CATEGORY", "HAS_COLOR", "ALSO_BUY", "ALSO_VIEW"],
        "endpoint_constraints": {
            "HAS_BRAND": [["product", "brand"]],
            "HAS_CATEGORY": [["product", "category"]],
            "HAS_COLOR": [["product", "color"]],
            "ALSO_BUY": [["product", "product"]],
            "ALSO_VIEW": [["product", "product"]],
        },
        "text_fields": {
            "product": ["title", "description"],
            "brand": ["name"],
            "category": ["name"],
            "color": ["name"],
        },
    }
)

_ONSETS = ("b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_VOWELS = ("a", "e", "i", "o", "u")


def make_words(rng: np.random.Generator, n: int, syllables: int = 3) -> list[str]:
    """``n`` distinct pronounceable nonsense words."""
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < n:
        w = "".join(
            _ONSETS[int(rng.integers(len(_ONSETS)))] + _VOWELS[int(rng.integers(len(_VOWELS)))]
            for _ in range(syllables)
        )
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def random_graph(
    rng: np.random.Generator,
    schema: SkbSchema,
    n_nodes: int,
    edge_prob: float = 0.1,
    vocab: int = 30,
) -> SkbGraph:
    """Erdos-Renyi style graph honoring the schema's endpoint constraints."""
    labels = sorted(schema.node_types)
    words = make_words(rng, vocab, syllables=2)
    width = len(str(max(n_nodes - 1, 0)))
    nodes = []
    for i in range(n_nodes):
        lab = labels[int(rng.integers(len(labels)))]
        fields = {
            f: " ".join(words[int(j)] for j in rng.integers(vocab, size=int(rng.integers(1, 4))))
            for f in schema.fields_of(lab)
        }
        nodes.append(SkbNode(f"n{i:0{width}d}", lab, fields))
    edges = []
    for a in range(n_nodes):
        for b in range(a, n_nodes):
            for rel in schema.relation_types:
                if not schema.endpoint_ok(rel, nodes[a].label, nodes[b].label):
                    continue
                if rng.random() < edge_prob:
                    edges.append(SkbEdge(nodes[a].id, rel, nodes[b].id))
    return SkbGraph(schema, nodes, edges)


@dataclass
class Benchmark:
    graph: SkbGraph
    queries: dict[str, str]
    gold: GoldSet
    plans: dict[str, object]
    dense: dict[str, RankedList]
    seed: int

    def counts(self) -> dict:
        return {
            "seed": self.seed,
            "graph": self.graph.stats(),
            "queries": len(self.queries),
            "gold_pairs": sum(len(self.gold[q]) for q in self.gold),
            "failing_plans": sum(1 for p in self.plans.values() if isinstance(p, str)),
        }


_RISKS = ("weak", "normal", "aggressive")


def make_benchmark(
    seed: int = 7,
    n_products: int = 950,
    n_brands: int = 20,
    n_categories: int = 20,
    n_colors: int = 10,
    n_queries: int = 50,
    dense_depth: int = 100,
    failing_plans: int = 2,
) -> Benchmark:
    rng = np.random.default_rng(seed)
    vocab = make_words(rng, 400 + n_brands + n_categories + n_colors)
    brand_names = vocab[:n_brands]
    cat_names = vocab[n_brands : n_brands + n_categories]
    color_names = vocab[n_brands + n_categories : n_brands + n_categories + n_colors]
    words = vocab[n_brands + n_categories + n_colors :]

    nodes: list[SkbNode] = []
    edges: list[SkbEdge] = []
    brands = [f"b{i:03d}" for i in range(n_brands)]
    cats = [f"c{i:03d}" for i in range(n_categories)]
    colors = [f"k{i:03d}" for i in range(n_colors)]
    for ids, names, lab in ((brands, brand_names, "brand"), (cats, cat_names, "category"), (colors, color_names, "color")):
        nodes.extend(SkbNode(i, lab, {"name": n}) for i, n in zip(ids, names))

    products = [f"p{i:04d}" for i in range(n_products)]
    brand_of: dict[str, str] = {}
    titles: dict[str, list[str]] = {}
    for pid in products:
        titles[pid] = [words[int(j)] for j in rng.choice(len(words), size=6, replace=False)]
        brand_of[pid] = brands[int(rng.integers(n_brands))]

    # Gold pairs: g1 shares the query's brand and words, g2 is off-brand.
    order = rng.permutation(n_products)
    queries: dict[str, str] = {}
    answers: dict[str, frozenset[str]] = {}
    plans: dict[str, object] = {}
    query_words: dict[str, list[str]] = {}
    query_brand: dict[str, str] = {}
    for q in range(n_queries):
        qid = f"q{q:03d}"
        g1, g2 = products[order[2 * q]], products[order[2 * q + 1]]
        b = brands[q % n_brands]
        brand_of[g1] = b
        if brand_of[g2] == b:
            brand_of[g2] = brands[(q + 1) % n_brands]
        qw = [words[int(j)] for j in rng.choice(len(words), size=4, replace=False)]
        titles[g1] = qw + titles[g1][:2]
        query_words[qid] = qw
        query_brand[qid] = b
        answers[qid] = frozenset((g1, g2))
        brand_name = brand_names[brands.index(b)]
        queries[qid] = f"{brand_name} {' '.join(qw)}"
        plans[qid] = {
            "retrieval_mode": "graph_filter_doc",
            "anchors": [{"var": "A1", "text": brand_name, "label": "brand", "match_mode": "name"}],
            "hops": [{"from": "A1", "rel": "HAS_BRAND", "to_var": "T", "to_label": "product"}],
            "target": {"var": "T", "labels": ["product"], "relevance_text": " ".join(qw)},
            "risk_level": _RISKS[q % len(_RISKS)],
        }
    for q in range(min(failing_plans, n_queries)):
        # Unparseable planner output for the last few queries.
        plans[f"q{n_queries - 1 - q:03d}"] = "I cannot produce a plan for this query."

    for pid in products:
        desc = " ".join(words[int(j)] for j in rng.choice(len(words), size=12, replace=False))
        nodes.append(SkbNode(pid, "product", {"title": " ".join(titles[pid]), "description": desc}))
        edges.append(SkbEdge(pid, "HAS_BRAND", brand_of[pid]))
        edges.append(SkbEdge(pid, "HAS_CATEGORY", cats[int(rng.integers(n_categories))]))
        edges.append(SkbEdge(pid, "HAS_COLOR", colors[int(rng.integers(n_colors))]))
    for _ in range(n_products):
        a, b = rng.choice(n_products, size=2, replace=False)
        rel = "ALSO_BUY" if rng.random() < 0.5 else "ALSO_VIEW"
        edges.append(SkbEdge(products[int(a)], rel, products[int(b)]))
    graph = SkbGraph(AMAZON_LIKE_SCHEMA, nodes, edges)

    dense: dict[str, RankedList] = {}
    for qid in queries:
        g1, g2 = sorted(answers[qid], key=lambda p: brand_of[p] != query_brand[qid])
        pool = [p for p in products if p not in (g1, g2)]
        filler = [pool[int(i)] for i in rng.choice(len(pool), size=dense_depth - 2, replace=False)]
        filler.insert(int(rng.integers(0, 5)), g2)
        filler.insert(int(rng.integers(40, dense_depth)), g1)
        items = tuple((pid, 1.0 - r / (2.0 * dense_depth)) for r, pid in enumerate(filler))
        dense[qid] = RankedList(qid, items, "dense")
    return Benchmark(graph, queries, GoldSet(answers, queries), plans, dense, seed)


def write_benchmark(bench: Benchmark, directory) -> dict[str, str]:
    """Write graph, queries, gold, mock plans and dense run; return the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dump_skb_dir(bench.graph, d / "skb")
    paths = {
        "skb": str(d / "skb"),
        "queries": str(d / "queries.jsonl"),
        "gold": str(d / "gold.jsonl"),
        "plans": str(d / "plans.jsonl"),
        "dense": str(d / "dense.run"),
    }
    with open(paths["queries"], "w", encoding="utf-8") as fh:
        for qid in sorted(bench.queries):
            fh.write(json.dumps({"qid": qid, "query": bench.queries[qid]}) + "\n")
    write_gold(paths["gold"], bench.gold)
    with open(paths["plans"], "w", encoding="utf-8") as fh:
        for qid in sorted(bench.plans):
            fh.write(json.dumps({"qid": qid, "plan": bench.plans[qid]}) + "\n")
    write_run(paths["dense"], bench.dense, header={"seed": bench.seed, "source": "synthetic"})
    return paths
