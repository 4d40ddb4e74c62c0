"""Stage 1: link anchors, compile a plan to a pattern query, match it, rescore.

Pattern semantics: every plan variable is bound to one node; hops are
undirected typed-edge constraints; two variables may bind the same node (one
MATCH clause per hop in the emitted Cypher, so no uniqueness across hops).
An assignment scores the sum of its anchors' binding scores and a target keeps
the best-scoring assignment that reaches it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Union

from .embed import AnchorBinding, Embedder, VectorIndex, link_anchor
from .llm import AuthError
from .plan import Plan, PlanError, parse_plan, var_labels
from .ranking import QueryMeta, RankedList
from .skb import SkbGraph

__all__ = [
    "DEFAULT_LINK_PARAMS",
    "QueryIR",
    "CandidateTable",
    "Stage1Result",
    "CompileError",
    "ExplosionError",
    "compile_plan",
    "emit_cypher",
    "execute",
    "dense_rescore",
    "stage1",
]

log = logging.getLogger(__name__)

# (K, tau) per match mode.
DEFAULT_LINK_PARAMS = MappingProxyType({"name": (5, 0.95), "doc": (10, 0.90)})
DEFAULT_MAX_ASSIGNMENTS = 5_000_000

Triple = tuple[str, str, str]
IndexMap = Mapping[tuple[str, str], VectorIndex]
Planner = Callable[[str, str], Union[str, Plan]]


class CompileError(ValueError):
    pass


class ExplosionError(RuntimeError):
    pass


@dataclass(frozen=True)
class QueryIR:
    bindings: Mapping[str, tuple[AnchorBinding, ...]]
    pattern: tuple[Triple, ...]
    target_var: str
    target_labels: tuple[str, ...]
    # Allowed labels per variable; a missing entry means unconstrained.
    var_labels: Mapping[str, frozenset[str]] = field(default_factory=dict)
    doc_search: bool = False

    def variables(self) -> list[str]:
        seen = dict.fromkeys(self.bindings)
        for a, _, b in self.pattern:
            seen.setdefault(a)
            seen.setdefault(b)
        seen.setdefault(self.target_var)
        return list(seen)

    def labels_for(self, var: str) -> frozenset[str] | None:
        labs = self.var_labels.get(var)
        if var == self.target_var:
            t = frozenset(self.target_labels)
            labs = t if labs is None else labs & t
        return labs

    def is_path_shaped(self) -> bool:
        degree: dict[str, int] = {}
        for a, _, b in self.pattern:
            degree[a] = degree.get(a, 0) + 1
            degree[b] = degree.get(b, 0) + 1
        return all(d <= 2 for d in degree.values())


@dataclass(frozen=True)
class CandidateTable:
    rows: Mapping[str, float]

    @property
    def n_cand(self) -> int:
        return len(self.rows)


@dataclass
class Stage1Result:
    ranking: RankedList
    meta: QueryMeta
    plan: Plan | None = None
    diagnostics: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return self.meta.valid


def compile_plan(
    plan: Plan,
    graph: SkbGraph,
    indices: IndexMap,
    embedder: Embedder,
    link_params: Mapping[str, tuple[int, float]] = DEFAULT_LINK_PARAMS,
    diagnostics: list[str] | None = None,
) -> QueryIR:
    """Link every anchor and turn hops into undirected pattern triples.

    A ``doc_search`` plan links its single anchor against the whole doc index
    (no K cap, no ratio cut) and compiles to an empty pattern.
    """
    if plan.is_skip or plan.target is None:
        raise CompileError("skip plan has nothing to compile")
    diags = diagnostics if diagnostics is not None else []
    bindings: dict[str, tuple[AnchorBinding, ...]] = {}
    for a in plan.anchors:
        index = indices.get((a.label, a.match_mode))
        if index is None:
            raise CompileError(f"no {a.match_mode} index for label {a.label!r}")
        if plan.is_doc_search:
            sims = index.similarities(embedder.embed([a.text])[0])
            order = sorted(range(len(sims)), key=lambda i: (-sims[i], index.ids[i]))
            found = [AnchorBinding(index.ids[i], float(sims[i])) for i in order]
        else:
            k, tau = link_params[a.match_mode]
            found = link_anchor(index, embedder, a.text, k, tau, diags)
        if not found:
            diags.append(f"anchor {a.var} ({a.text!r}) has no bindings")
        bindings[a.var] = tuple(found)
    pattern = tuple((h.src, h.rel, h.to_var) for h in plan.hops)
    labels = {v: frozenset(ls) for v, ls in var_labels(plan).items()}
    ir = QueryIR(
        bindings=MappingProxyType(bindings),
        pattern=pattern,
        target_var=plan.target.var,
        target_labels=plan.target.labels,
        var_labels=MappingProxyType(labels),
        doc_search=plan.is_doc_search,
    )
    if not ir.is_path_shaped():
        diags.append("tree-shaped pattern: anchor score sums every bound anchor")
    return ir


def _cy_name(var: str) -> str:
    return "`" + var.replace("`", "``") + "`"


def _cy_value(v) -> str:
    if isinstance(v, str):
        return json.dumps(v)
    return repr(float(v))


def emit_cypher(ir: QueryIR) -> str:
    """Render the IR as one Cypher query; identical IRs give identical text."""
    if not ir.pattern:
        raise CompileError("nothing to match: empty pattern is executed natively")
    lines = []
    score_terms = []
    for var, found in ir.bindings.items():
        row = _cy_name(var + "_binding")
        rows = ", ".join(f"{{id: {_cy_value(b.node)}, score: {_cy_value(b.score)}}}" for b in found)
        lines.append(f"UNWIND [{rows}] AS {row}")
        labs = ir.var_labels.get(var)
        lab = f":{_cy_name(next(iter(labs)))}" if labs and len(labs) == 1 else ""
        lines.append(f"MATCH ({_cy_name(var)}{lab} {{id: {row}.id}})")
        score_terms.append(f"{row}.score")
    for a, rel, b in ir.pattern:
        lines.append(f"MATCH ({_cy_name(a)})-[:{_cy_name(rel)}]-({_cy_name(b)})")
    filters = []
    for var in ir.variables():
        if var in ir.bindings:
            continue
        labs = ir.labels_for(var)
        if labs:
            alts = " OR ".join(f"{_cy_name(var)}:{_cy_name(x)}" for x in sorted(labs))
            filters.append(f"({alts})" if len(labs) > 1 else alts)
    if filters:
        lines.append("WHERE " + " AND ".join(filters))
    t = _cy_name(ir.target_var)
    total = " + ".join(score_terms) if score_terms else "0.0"
    lines.append(f"WITH {t}, {total} AS path_score")
    lines.append(f"RETURN {t}.id AS id, max(path_score) AS anchor_score")
    lines.append("ORDER BY anchor_score DESC, id ASC")
    return "\n".join(lines) + "\n"


def _search_order(ir: QueryIR, variables: list[str]) -> list[str]:
    adj: dict[str, set[str]] = {v: set() for v in variables}
    for a, _, b in ir.pattern:
        adj[a].add(b)
        adj[b].add(a)

    def seed_key(v):
        # Smallest binding set first; unbound variables last.
        return (0, len(ir.bindings[v]), v) if v in ir.bindings else (1, 0, v)

    order: list[str] = []
    placed: set[str] = set()
    while len(order) < len(variables):
        frontier = [v for v in variables if v not in placed and adj[v] & placed]
        pool = frontier or [v for v in variables if v not in placed]
        nxt = min(pool, key=seed_key)
        order.append(nxt)
        placed.add(nxt)
    return order


def execute(
    ir: QueryIR, graph: SkbGraph, max_assignments: int = DEFAULT_MAX_ASSIGNMENTS
) -> CandidateTable:
    """Enumerate pattern matches with seed-and-expand backtracking.

    Raises ``ExplosionError`` once more than ``max_assignments`` partial
    assignments have been generated.
    """
    variables = ir.variables()
    order = _search_order(ir, variables)
    pos = {v: i for i, v in enumerate(order)}
    # For each variable, the pattern edges back to variables placed earlier.
    back: list[list[tuple[str, str]]] = [[] for _ in order]
    self_loops: list[list[str]] = [[] for _ in order]
    for a, rel, b in ir.pattern:
        if a == b:
            self_loops[pos[a]].append(rel)
        elif pos[a] < pos[b]:
            back[pos[b]].append((rel, a))
        else:
            back[pos[a]].append((rel, b))
    score_of = {v: {b.node: b.score for b in ir.bindings[v]} for v in ir.bindings}
    labels = [ir.labels_for(v) for v in order]
    target_i = pos[ir.target_var]

    def domain(i: int, assigned: list[str]) -> list[str]:
        var = order[i]
        if back[i]:
            rel, other = back[i][0]
            cands = graph.neighbors(assigned[pos[other]], rel)
            for rel, other in back[i][1:]:
                allowed = set(graph.neighbors(assigned[pos[other]], rel))
                cands = [c for c in cands if c in allowed]
        elif var in score_of:
            cands = sorted(score_of[var])
        else:
            labs = labels[i]
            if labs is None:
                cands = sorted(graph.nodes)
            else:
                cands = sorted(x for lab in labs for x in graph.ids_with_label(lab))
        out = []
        labs = labels[i]
        binding = score_of.get(var)
        for c in cands:
            if binding is not None and c not in binding:
                continue
            if labs is not None and graph.label_of(c) not in labs:
                continue
            if any(c not in graph.neighbors(c, rel) for rel in self_loops[i]):
                continue
            out.append(c)
        return out

    best: dict[str, float] = {}
    assigned: list[str] = [""] * len(order)
    budget = [max_assignments]

    def walk(i: int, total: float) -> None:
        if i == len(order):
            t = assigned[target_i]
            if t not in best or total > best[t]:
                best[t] = total
            return
        var = order[i]
        binding = score_of.get(var)
        cands = domain(i, assigned)
        budget[0] -= len(cands)
        if budget[0] < 0:
            raise ExplosionError(f"more than {max_assignments} intermediate assignments")
        for c in cands:
            assigned[i] = c
            walk(i + 1, total + (binding[c] if binding is not None else 0.0))

    walk(0, 0.0)
    return CandidateTable(MappingProxyType(best))


def dense_rescore(
    table: CandidateTable,
    relevance_text: str,
    doc_indices: Mapping[str, VectorIndex],
    embedder: Embedder,
    qid: str = "",
    diagnostics: list[str] | None = None,
    tag: str = "stage1",
) -> RankedList:
    """Add cosine(relevance_text, candidate doc vector) to each anchor score.

    ``doc_indices`` maps label -> doc-mode index. Empty ``relevance_text``
    ranks by anchor score alone; a candidate missing from every doc index
    gets a zero cosine term and a diagnostic.
    """
    if not relevance_text.strip():
        return RankedList.from_scores(qid, dict(table.rows), tag)
    q = embedder.embed([relevance_text])[0]
    sims = {label: idx.similarities(q) for label, idx in doc_indices.items()}
    scores = {}
    for nid, anchor_score in table.rows.items():
        term = None
        for label, idx in doc_indices.items():
            i = idx.position(nid)
            if i is not None:
                term = float(sims[label][i])
                break
        if term is None:
            term = 0.0
            if diagnostics is not None:
                diagnostics.append(f"candidate {nid} missing from doc index")
        scores[nid] = anchor_score + term
    return RankedList.from_scores(qid, scores, tag)


def _failed(qid: str, diags: list[str], plan: Plan | None = None) -> Stage1Result:
    return Stage1Result(RankedList(qid, (), "stage1"), QueryMeta(0, "no_trade", False), plan, diags)


def stage1(
    qid: str,
    query: str,
    planner: Planner,
    graph: SkbGraph,
    indices: IndexMap,
    embedder: Embedder,
    link_params: Mapping[str, tuple[int, float]] = DEFAULT_LINK_PARAMS,
    max_assignments: int = DEFAULT_MAX_ASSIGNMENTS,
) -> Stage1Result:
    """Plan, compile, execute and rescore one query.

    Bad plans and planner failures yield an empty, invalid result; only
    ``AuthError`` propagates.
    """
    diags: list[str] = []
    try:
        raw = planner(qid, query)
        plan = raw if isinstance(raw, Plan) else parse_plan(raw, graph.schema)
    except PlanError as exc:
        return _failed(qid, [f"plan rejected: {d}" for d in exc.diagnostics])
    except AuthError:
        # Bad credentials fail every query the same way; stop the run.
        raise
    except Exception as exc:  # planner transport or mock lookup failures
        log.warning("planner failed for %s: %s", qid, exc)
        return _failed(qid, [f"planner failed: {exc}"])
    if plan.is_skip:
        return _failed(qid, ["planner returned skip"], plan)
    try:
        ir = compile_plan(plan, graph, indices, embedder, link_params, diags)
        table = execute(ir, graph, max_assignments)
        doc_indices = {
            lab: indices[(lab, "doc")] for lab in plan.target.labels if (lab, "doc") in indices
        }
        ranking = dense_rescore(
            table, plan.target.relevance_text, doc_indices, embedder, qid, diags
        )
    except (CompileError, ExplosionError, KeyError, ValueError) as exc:
        diags.append(f"execution failed: {exc}")
        return _failed(qid, diags, plan)
    meta = QueryMeta(len(ranking), plan.risk_level, True)
    return Stage1Result(ranking, meta, plan, diags)

