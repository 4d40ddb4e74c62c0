"""Ranking metrics (Hit@k, Recall@k, MRR), gold files and metric tables.

Metrics are macro-averaged over the gold queries and reported in percent.
A gold query without a run is scored as an empty run.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence, Union

from .ranking import RankedList

__all__ = [
    "GoldSet",
    "MetricsTable",
    "hit_at_k",
    "recall_at_k",
    "mrr",
    "evaluate",
    "read_gold",
    "write_gold",
]

Ranking = Union[RankedList, Sequence[str]]


def _ids(run: Ranking) -> list[str]:
    return run.ids if isinstance(run, RankedList) else list(run)


def hit_at_k(run: Ranking, gold: Iterable[str], k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    gold = set(gold)
    return int(any(nid in gold for nid in _ids(run)[:k]))


def recall_at_k(run: Ranking, gold: Iterable[str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    gold = set(gold)
    if not gold:
        raise ValueError("recall is undefined for an empty gold set")
    return len(gold.intersection(_ids(run)[:k])) / len(gold)


def mrr(run: Ranking, gold: Iterable[str]) -> float:
    """Reciprocal rank of the first gold id; 0 when none is retrieved."""
    gold = set(gold)
    for rank, nid in enumerate(_ids(run), start=1):
        if nid in gold:
            return 1.0 / rank
    return 0.0


@dataclass(frozen=True)
class GoldSet:
    answers: Mapping[str, frozenset[str]]
    queries: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for qid, ans in self.answers.items():
            if not ans:
                raise ValueError(f"{qid}: empty gold set")

    def __len__(self) -> int:
        return len(self.answers)

    def __iter__(self):
        return iter(sorted(self.answers))

    def __getitem__(self, qid: str) -> frozenset[str]:
        return self.answers[qid]

    def query(self, qid: str) -> str:
        return self.queries.get(qid, "")


def read_gold(source: IO[str] | str | os.PathLike) -> GoldSet:
    """Lines of ``{"qid", "query", "answers": [...]}``."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return read_gold(fh)
    answers: dict[str, frozenset[str]] = {}
    queries: dict[str, str] = {}
    for lineno, line in enumerate(source, start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        qid = str(rec["qid"])
        if qid in answers:
            raise ValueError(f"line {lineno}: duplicate qid {qid!r}")
        answers[qid] = frozenset(str(a) for a in rec["answers"])
        queries[qid] = rec.get("query", "")
    return GoldSet(answers, queries)


def write_gold(out: IO[str] | str | os.PathLike, gold: GoldSet) -> None:
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", encoding="utf-8") as fh:
            write_gold(fh, gold)
        return
    for qid in gold:
        rec = {"qid": qid, "query": gold.query(qid), "answers": sorted(gold[qid])}
        out.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass
class MetricsTable:
    """Per-query values (fractions) and macro averages (percent)."""

    columns: tuple[str, ...]
    per_query: dict[str, dict[str, float]]
    macro: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "n_queries": len(self.per_query),
            "macro": {c: self.macro[c] for c in self.columns},
            "per_query": {q: self.per_query[q] for q in sorted(self.per_query)},
        }

    def render(self, label: str = "run") -> str:
        head = ["", *self.columns]
        row = [label, *(f"{self.macro[c]:.1f}" for c in self.columns)]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
        return fmt(head) + "\n" + fmt(row) + "\n"


def evaluate(
    runs: Mapping[str, RankedList],
    gold: GoldSet,
    hit_ks: Sequence[int] = (1, 5),
    recall_ks: Sequence[int] = (20,),
    with_mrr: bool = True,
) -> MetricsTable:
    columns = tuple(f"Hit@{k}" for k in hit_ks) + tuple(f"R@{k}" for k in recall_ks)
    if with_mrr:
        columns += ("MRR",)
    per_query: dict[str, dict[str, float]] = {}
    for qid in gold:
        run = runs.get(qid, RankedList(qid))
        row = {f"Hit@{k}": float(hit_at_k(run, gold[qid], k)) for k in hit_ks}
        row.update({f"R@{k}": recall_at_k(run, gold[qid], k) for k in recall_ks})
        if with_mrr:
            row["MRR"] = mrr(run, gold[qid])
        per_query[qid] = row
    n = len(per_query)
    macro = {
        c: (100.0 * sum(r[c] for r in per_query.values()) / n if n else 0.0) for c in columns
    }
    return MetricsTable(columns, per_query, macro)
