"""Per-query ranked candidate lists and the six-column run file format.

Run file lines are ``qid Q0 node_id rank score tag`` with 1-based ranks.
Lines starting with ``#`` carry provenance and are skipped by the reader.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import IO, Iterable, Mapping

__all__ = [
    "RankedList",
    "QueryMeta",
    "RunFormatError",
    "read_run",
    "write_run",
    "read_meta",
    "write_meta",
    "format_score",
]

RISK_LEVELS = ("no_trade", "weak", "normal", "aggressive")


class RunFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RankedList:
    qid: str
    items: tuple[tuple[str, float], ...] = ()
    tag: str = "run"

    def __post_init__(self):
        object.__setattr__(self, "items", tuple((str(i), float(s)) for i, s in self.items))
        seen = set()
        prev = None
        for nid, score in self.items:
            if nid in seen:
                raise ValueError(f"{self.qid}: duplicate node id {nid!r}")
            seen.add(nid)
            if prev is not None and score > prev:
                raise ValueError(f"{self.qid}: scores must be non-increasing")
            prev = score

    @classmethod
    def from_scores(cls, qid: str, scores: Mapping[str, float], tag: str = "run") -> "RankedList":
        """Sort by score descending, ties by ascending node id."""
        items = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(qid, tuple(items), tag)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def ids(self) -> list[str]:
        return [nid for nid, _ in self.items]

    def ranks(self) -> dict[str, int]:
        return {nid: r for r, (nid, _) in enumerate(self.items, start=1)}

    def scores(self) -> dict[str, float]:
        return dict(self.items)

    def top(self, depth: int) -> "RankedList":
        return RankedList(self.qid, self.items[:depth], self.tag)

    def retag(self, tag: str) -> "RankedList":
        return RankedList(self.qid, self.items, tag)


def format_score(score: float) -> str:
    # repr round-trips float64 exactly, which keeps re-read runs bit-identical.
    return repr(float(score))


def write_run(
    out: IO[str] | str | os.PathLike,
    runs: Iterable[RankedList] | Mapping[str, RankedList],
    header: Mapping[str, object] | None = None,
) -> None:
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", encoding="utf-8") as fh:
            write_run(fh, runs, header)
        return
    if isinstance(runs, Mapping):
        runs = [runs[q] for q in sorted(runs)]
    if header:
        out.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    for run in runs:
        tag = run.tag.replace(" ", "_") or "run"
        for rank, (nid, score) in enumerate(run.items, start=1):
            out.write(f"{run.qid} Q0 {nid} {rank} {format_score(score)} {tag}\n")


def read_run(source: IO[str] | str | os.PathLike) -> dict[str, RankedList]:
    """Parse a run file into ``qid -> RankedList``.

    Lines of one qid may appear in any order; they are re-ordered by rank.
    A repeated (qid, node) or (qid, rank) pair, or ranks that disagree with
    the score order, is an error.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return read_run(fh)
    rows: dict[str, list[tuple[int, str, float, str]]] = {}
    for lineno, line in enumerate(source, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise RunFormatError(f"line {lineno}: expected 6 columns, got {len(parts)}")
        qid, _q0, nid, rank, score, tag = parts
        try:
            rows.setdefault(qid, []).append((int(rank), nid, float(score), tag))
        except ValueError:
            raise RunFormatError(f"line {lineno}: bad rank or score") from None
    runs = {}
    for qid, entries in rows.items():
        entries.sort()
        ranks = [r for r, *_ in entries]
        if len(set(ranks)) != len(ranks):
            raise RunFormatError(f"{qid}: duplicate rank")
        if ranks[0] < 1:
            raise RunFormatError(f"{qid}: ranks are 1-based")
        ids = [nid for _, nid, _, _ in entries]
        if len(set(ids)) != len(ids):
            raise RunFormatError(f"{qid}: duplicate node id")
        try:
            runs[qid] = RankedList(qid, tuple((nid, s) for _, nid, s, _ in entries), entries[0][3])
        except ValueError:
            raise RunFormatError(f"{qid}: rank order disagrees with scores") from None
    return runs


@dataclass(frozen=True)
class QueryMeta:
    """Stage-1 metadata handed to fusion for one query."""

    n_cand: int = 0
    risk_level: str = "no_trade"
    valid: bool = False

    def __post_init__(self):
        if self.n_cand < 0:
            raise ValueError("n_cand must be >= 0")
        if self.risk_level not in RISK_LEVELS:
            raise ValueError(f"invalid risk_level {self.risk_level!r}")


def write_meta(out: IO[str] | str | os.PathLike, metas: Mapping[str, QueryMeta], header=None) -> None:
    """One JSON record per qid: ``{qid, n_cand, risk_level, valid}``."""
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", encoding="utf-8") as fh:
            write_meta(fh, metas, header)
        return
    if header:
        out.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    for qid in sorted(metas):
        out.write(json.dumps({"qid": qid, **asdict(metas[qid])}) + "\n")


def read_meta(source: IO[str] | str | os.PathLike) -> dict[str, QueryMeta]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return read_meta(fh)
    metas = {}
    for line in source:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rec = json.loads(line)
        metas[rec["qid"]] = QueryMeta(int(rec["n_cand"]), rec["risk_level"], bool(rec["valid"]))
    return metas
