"""In-memory semi-structured knowledge base: typed nodes with text, undirected typed edges.

Three line-oriented files describe an SKB:

* schema: one JSON document with ``node_types``, ``relation_types``,
  ``endpoint_constraints`` (relation -> list of ``[label, label]`` pairs) and
  ``text_fields`` (label -> ordered field names; the first one is the name).
* nodes: one ``{"id", "label", "fields": {...}}`` record per line.
* edges: one ``{"src", "rel", "dst"}`` record per line.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import IO, Iterable, Iterator, Mapping

__all__ = [
    "SkbError",
    "SkbLoadError",
    "SkbSchema",
    "SkbNode",
    "SkbEdge",
    "SkbGraph",
    "load_skb",
    "load_skb_dir",
    "dump_skb",
    "dump_skb_dir",
    "dumps_skb",
    "neighbors",
]


class SkbError(ValueError):
    """Invalid schema, node or edge."""


class SkbLoadError(SkbError):
    """Raised when a load is rejected. ``diagnostics`` holds one message per problem."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        shown = "; ".join(self.diagnostics[:5])
        more = len(self.diagnostics) - 5
        if more > 0:
            shown += f" (+{more} more)"
        super().__init__(shown)


@dataclass(frozen=True)
class SkbSchema:
    node_types: frozenset[str]
    # Declaration order is kept; serialization emits relations in this order.
    relation_types: tuple[str, ...]
    endpoint_constraints: Mapping[str, frozenset[tuple[str, str]]]
    text_fields: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        problems = []
        if not self.node_types:
            problems.append("node_types is empty")
        if not self.relation_types:
            problems.append("relation_types is empty")
        if len(set(self.relation_types)) != len(self.relation_types):
            problems.append("relation_types has duplicates")
        for rel, pairs in self.endpoint_constraints.items():
            if rel not in self.relation_types:
                problems.append(f"endpoint constraint for undeclared relation {rel!r}")
            for a, b in pairs:
                for lab in (a, b):
                    if lab not in self.node_types:
                        problems.append(f"endpoint constraint {rel}: undeclared label {lab!r}")
        for lab, fields in self.text_fields.items():
            if lab not in self.node_types:
                problems.append(f"text_fields for undeclared label {lab!r}")
            if len(set(fields)) != len(fields):
                problems.append(f"text_fields[{lab}] has duplicates")
        if problems:
            raise SkbError("; ".join(problems))

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SkbSchema":
        try:
            node_types = frozenset(doc["node_types"])
            relation_types = tuple(doc["relation_types"])
            constraints = {
                rel: frozenset(tuple(p) for p in pairs)
                for rel, pairs in doc.get("endpoint_constraints", {}).items()
            }
            text_fields = {lab: tuple(f) for lab, f in doc.get("text_fields", {}).items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise SkbError(f"malformed schema document: {exc!r}") from None
        for pairs in constraints.values():
            if any(len(p) != 2 for p in pairs):
                raise SkbError("endpoint constraint pairs must have two labels")
        return cls(
            node_types=node_types,
            relation_types=relation_types,
            endpoint_constraints=MappingProxyType(constraints),
            text_fields=MappingProxyType(text_fields),
        )

    def to_dict(self) -> dict:
        return {
            "node_types": sorted(self.node_types),
            "relation_types": list(self.relation_types),
            "endpoint_constraints": {
                rel: [list(p) for p in sorted(self.endpoint_constraints[rel])]
                for rel in self.relation_types
                if rel in self.endpoint_constraints
            },
            "text_fields": {lab: list(self.text_fields[lab]) for lab in sorted(self.text_fields)},
        }

    def fields_of(self, label: str) -> tuple[str, ...]:
        return self.text_fields.get(label, ())

    def name_field(self, label: str) -> str | None:
        fields = self.fields_of(label)
        return fields[0] if fields else None

    def endpoint_ok(self, rel: str, a: str, b: str) -> bool:
        """True if an undirected ``rel`` edge may join labels ``a`` and ``b``.

        A relation without declared constraints accepts any pair.
        """
        pairs = self.endpoint_constraints.get(rel)
        if pairs is None:
            return True
        return (a, b) in pairs or (b, a) in pairs


@dataclass(frozen=True)
class SkbNode:
    id: str
    label: str
    fields: Mapping[str, str] = field(default_factory=dict)

    def text(self, name: str) -> str:
        return self.fields.get(name, "")


@dataclass(frozen=True, order=True)
class SkbEdge:
    src: str
    rel: str
    dst: str

    def canonical(self) -> "SkbEdge":
        if self.dst < self.src:
            return SkbEdge(self.dst, self.rel, self.src)
        return self


class SkbGraph:
    """Immutable typed property graph with symmetric per-relation adjacency."""

    def __init__(self, schema: SkbSchema, nodes: Iterable[SkbNode], edges: Iterable[SkbEdge]):
        self.schema = schema
        self._nodes: dict[str, SkbNode] = {}
        for node in nodes:
            if node.id in self._nodes:
                raise SkbError(f"duplicate node id {node.id!r}")
            self._nodes[node.id] = node
        adj: dict[str, dict[str, set[str]]] = {nid: {} for nid in self._nodes}
        canon = set()
        for e in edges:
            e = e.canonical()
            if e in canon:
                continue
            canon.add(e)
            adj[e.src].setdefault(e.rel, set()).add(e.dst)
            adj[e.dst].setdefault(e.rel, set()).add(e.src)
        self._edges = tuple(sorted(canon))
        self._adj = {
            nid: {rel: tuple(sorted(ids)) for rel, ids in per.items()} for nid, per in adj.items()
        }
        by_label: dict[str, list[str]] = {}
        for nid in sorted(self._nodes):
            by_label.setdefault(self._nodes[nid].label, []).append(nid)
        self._by_label = {lab: tuple(ids) for lab, ids in by_label.items()}

    @property
    def nodes(self) -> Mapping[str, SkbNode]:
        return MappingProxyType(self._nodes)

    @property
    def edges(self) -> tuple[SkbEdge, ...]:
        """Canonical de-duplicated edges, sorted, with ``src <= dst``."""
        return self._edges

    def __contains__(self, node_id) -> bool:
        return node_id in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SkbGraph):
            return NotImplemented
        return (
            self.schema == other.schema
            and self._nodes == other._nodes
            and self._edges == other._edges
        )

    __hash__ = None

    def node(self, node_id: str) -> SkbNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise KeyError(f"unknown node id {node_id!r}") from None

    def label_of(self, node_id: str) -> str:
        return self.node(node_id).label

    def ids_with_label(self, label: str) -> tuple[str, ...]:
        return self._by_label.get(label, ())

    def name(self, node_id: str) -> str:
        node = self.node(node_id)
        name_field = self.schema.name_field(node.label)
        return node.text(name_field) if name_field else ""

    def neighbors(self, node_id: str, rel: str | None = None) -> tuple[str, ...]:
        """Neighbor ids in ascending order; all relations when ``rel`` is None."""
        if node_id not in self._adj:
            raise KeyError(f"unknown node id {node_id!r}")
        per = self._adj[node_id]
        if rel is not None:
            if rel not in self.schema.relation_types:
                raise SkbError(f"unknown relation {rel!r}")
            return per.get(rel, ())
        merged = set()
        for ids in per.values():
            merged.update(ids)
        return tuple(sorted(merged))

    def relations_of(self, node_id: str) -> Mapping[str, tuple[str, ...]]:
        self.node(node_id)
        return MappingProxyType(self._adj[node_id])

    def stats(self) -> dict:
        n, m = len(self._nodes), len(self._edges)
        degree_sum = sum(len(ids) for per in self._adj.values() for ids in per.values())
        return {
            "nodes": n,
            "edges": m,
            "avg_degree": degree_sum / n if n else 0.0,
            "labels": {lab: len(ids) for lab, ids in sorted(self._by_label.items())},
        }


def neighbors(graph: SkbGraph, node: str, rel: str | None = None) -> tuple[str, ...]:
    return graph.neighbors(node, rel)


def _lines(source) -> Iterator[tuple[int, str]]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            yield from _lines(fh)
        return
    for lineno, line in enumerate(source, start=1):
        if line.strip():
            yield lineno, line


def _read_schema(source) -> SkbSchema:
    if isinstance(source, (str, os.PathLike)):
        text = Path(source).read_text(encoding="utf-8")
    elif isinstance(source, Mapping):
        return SkbSchema.from_dict(source)
    else:
        text = source.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SkbLoadError([f"schema: not valid JSON ({exc.msg} at line {exc.lineno})"]) from None
    try:
        return SkbSchema.from_dict(doc)
    except SkbError as exc:
        raise SkbLoadError([f"schema: {exc}"]) from None


def load_skb(schema_source, nodes_source, edges_source) -> SkbGraph:
    """Load and validate an SKB; any violation rejects the whole load.

    Each source may be a path or an open text stream (the schema may also be a
    mapping). Problems are collected and raised together as ``SkbLoadError``
    with ``nodes line N`` / ``edges line N`` locations.
    """
    schema = _read_schema(schema_source)
    problems: list[str] = []
    nodes: dict[str, SkbNode] = {}

    for lineno, line in _lines(nodes_source):
        where = f"nodes line {lineno}"
        try:
            rec = json.loads(line)
            nid, label = rec["id"], rec["label"]
            fields = rec.get("fields") or {}
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            problems.append(f"{where}: malformed record ({exc.__class__.__name__})")
            continue
        if not isinstance(nid, str) or not nid:
            problems.append(f"{where}: id must be a non-empty string")
            continue
        if not isinstance(fields, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in fields.items()
        ):
            problems.append(f"{where}: fields must map names to strings")
            continue
        if label not in schema.node_types:
            problems.append(f"{where}: unknown label {label!r}")
            continue
        extra = set(fields) - set(schema.fields_of(label))
        if extra:
            problems.append(f"{where}: fields {sorted(extra)} not declared for {label}")
            continue
        if nid in nodes:
            problems.append(f"{where}: duplicate node id {nid!r}")
            continue
        nodes[nid] = SkbNode(nid, label, MappingProxyType(dict(fields)))

    edges: list[SkbEdge] = []
    for lineno, line in _lines(edges_source):
        where = f"edges line {lineno}"
        try:
            rec = json.loads(line)
            src, rel, dst = rec["src"], rec["rel"], rec["dst"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            problems.append(f"{where}: malformed record ({exc.__class__.__name__})")
            continue
        if rel not in schema.relation_types:
            problems.append(f"{where}: unknown relation {rel!r}")
            continue
        missing = [x for x in (src, dst) if x not in nodes]
        if missing:
            problems.append(f"{where}: dangling endpoint {missing[0]!r}")
            continue
        if not schema.endpoint_ok(rel, nodes[src].label, nodes[dst].label):
            problems.append(
                f"{where}: {rel} not allowed between {nodes[src].label} and {nodes[dst].label}"
            )
            continue
        edges.append(SkbEdge(src, rel, dst))

    if problems:
        raise SkbLoadError(problems)
    return SkbGraph(schema, nodes.values(), edges)


def load_skb_dir(directory) -> SkbGraph:
    d = Path(directory)
    return load_skb(d / "schema.json", d / "nodes.jsonl", d / "edges.jsonl")


def dump_skb(graph: SkbGraph, schema_out: IO[str], nodes_out: IO[str], edges_out: IO[str]) -> None:
    """Write the canonical form; ``load_skb`` of the output equals ``graph``."""
    json.dump(graph.schema.to_dict(), schema_out, indent=2, sort_keys=False)
    schema_out.write("\n")
    for nid in sorted(graph.nodes):
        node = graph.nodes[nid]
        rec = {"id": nid, "label": node.label, "fields": dict(node.fields)}
        nodes_out.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
    for e in graph.edges:
        edges_out.write(json.dumps({"src": e.src, "rel": e.rel, "dst": e.dst}) + "\n")


def dump_skb_dir(graph: SkbGraph, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "schema.json", "w", encoding="utf-8") as s, open(
        d / "nodes.jsonl", "w", encoding="utf-8"
    ) as n, open(d / "edges.jsonl", "w", encoding="utf-8") as e:
        dump_skb(graph, s, n, e)


def dumps_skb(graph: SkbGraph) -> tuple[str, str, str]:
    bufs = io.StringIO(), io.StringIO(), io.StringIO()
    dump_skb(graph, *bufs)
    return tuple(b.getvalue() for b in bufs)
