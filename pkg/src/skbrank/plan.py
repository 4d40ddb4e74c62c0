"""Retrieval plans: the JSON object a planner emits for one query.

A plan names anchors (query phrases to link to nodes), hops (undirected typed
relations between plan variables) and a target variable, plus a self-reported
``risk_level`` and, for product graphs, an optional ``retrieval_mode``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from .skb import SkbSchema

__all__ = [
    "RISK_LEVELS",
    "RETRIEVAL_MODES",
    "Anchor",
    "Hop",
    "Target",
    "Plan",
    "Diagnostic",
    "PlanError",
    "parse_plan",
    "validate_against_schema",
    "skip_plan",
    "strip_fences",
]

RISK_LEVELS = ("no_trade", "weak", "normal", "aggressive")
RETRIEVAL_MODES = ("doc_search", "graph_filter_doc", "graph_expand", "graph_strict", "skip")
MATCH_MODES = ("name", "doc")

_TOP_KEYS = ("anchors", "hops", "target", "risk_level", "retrieval_mode")


@dataclass(frozen=True)
class Diagnostic:
    path: str
    rule: str
    message: str = ""

    def __str__(self) -> str:
        tail = f": {self.message}" if self.message else ""
        return f"{self.path}: {self.rule}{tail}"


class PlanError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class Anchor:
    var: str
    text: str
    label: str
    match_mode: str = "name"


@dataclass(frozen=True)
class Hop:
    src: str  # "from" on the wire
    rel: str
    to_var: str
    to_label: str


@dataclass(frozen=True)
class Target:
    var: str
    labels: tuple[str, ...]
    relevance_text: str = ""


@dataclass(frozen=True)
class Plan:
    anchors: tuple[Anchor, ...]
    hops: tuple[Hop, ...]
    target: Target | None
    risk_level: str = "no_trade"
    retrieval_mode: str | None = None
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @property
    def is_skip(self) -> bool:
        return self.retrieval_mode == "skip"

    @property
    def is_doc_search(self) -> bool:
        return self.retrieval_mode == "doc_search"

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "anchors": [
                {"var": a.var, "text": a.text, "label": a.label, "match_mode": a.match_mode}
                for a in self.anchors
            ],
            "hops": [
                {"from": h.src, "rel": h.rel, "to_var": h.to_var, "to_label": h.to_label}
                for h in self.hops
            ],
        }
        if self.target is not None:
            doc["target"] = {
                "var": self.target.var,
                "labels": list(self.target.labels),
                "relevance_text": self.target.relevance_text,
            }
        doc["risk_level"] = self.risk_level
        if self.retrieval_mode is not None:
            doc["retrieval_mode"] = self.retrieval_mode
        for k, v in self.extra.items():
            doc.setdefault(k, v)
        return doc

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False)


def skip_plan() -> Plan:
    """Fallback for failed planning: empty graph branch, ``no_trade``."""
    return Plan(anchors=(), hops=(), target=None, risk_level="no_trade", retrieval_mode="skip")


_FENCE = re.compile(r"^```[A-Za-z0-9_-]*[ \t]*\n(.*?)\n?```$", re.DOTALL)


def strip_fences(text: str) -> str:
    text = text.strip()
    m = _FENCE.match(text)
    return m.group(1).strip() if m else text


def _str(obj: Mapping, key: str, path: str, diags: list[Diagnostic], required=True) -> str | None:
    if key not in obj:
        if required:
            diags.append(Diagnostic(f"{path}.{key}", "missing required slot"))
        return None
    val = obj[key]
    if not isinstance(val, str):
        diags.append(Diagnostic(f"{path}.{key}", "must be a string"))
        return None
    return val


def parse_plan(text: str, schema: SkbSchema) -> Plan:
    """Parse raw planner output into a validated ``Plan``.

    Surrounding whitespace and one enclosing markdown fence are tolerated.
    Raises ``PlanError`` carrying every diagnostic found.
    """
    if not isinstance(text, str):
        raise PlanError([Diagnostic("$", "not well-formed", "plan text must be a string")])
    body = strip_fences(text)
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise PlanError([Diagnostic("$", "not well-formed", exc.msg)]) from None
    if not isinstance(doc, dict):
        raise PlanError([Diagnostic("$", "not well-formed", "top level must be an object")])
    plan = plan_from_dict(doc, schema)
    return plan


def plan_from_dict(doc: Mapping, schema: SkbSchema) -> Plan:
    diags: list[Diagnostic] = []

    mode = doc.get("retrieval_mode")
    if mode is not None and mode not in RETRIEVAL_MODES:
        diags.append(Diagnostic("$.retrieval_mode", "invalid retrieval_mode", repr(mode)))
        mode = None

    risk = doc.get("risk_level", "no_trade")
    if risk not in RISK_LEVELS:
        diags.append(Diagnostic("$.risk_level", "invalid risk_level", repr(risk)))

    skip = mode == "skip"
    anchors_raw = doc.get("anchors", [] if skip else None)
    hops_raw = doc.get("hops", [] if skip else None)
    target_raw = doc.get("target", None)

    anchors: list[Anchor] = []
    if anchors_raw is None:
        diags.append(Diagnostic("$.anchors", "missing required slot"))
    elif not isinstance(anchors_raw, list):
        diags.append(Diagnostic("$.anchors", "must be a list"))
    else:
        for i, a in enumerate(anchors_raw):
            path = f"$.anchors[{i}]"
            if not isinstance(a, dict):
                diags.append(Diagnostic(path, "must be an object"))
                continue
            n = len(diags)
            var = _str(a, "var", path, diags)
            txt = _str(a, "text", path, diags)
            label = _str(a, "label", path, diags)
            mm = _str(a, "match_mode", path, diags, required=False)
            if len(diags) > n:
                continue
            if not var:
                diags.append(Diagnostic(f"{path}.var", "must be non-empty"))
            if not txt.strip():
                diags.append(Diagnostic(f"{path}.text", "must be non-empty"))
            if mm is None:
                mm = "name" if len(schema.fields_of(label)) == 1 else "doc"
            elif mm not in MATCH_MODES:
                diags.append(Diagnostic(f"{path}.match_mode", "invalid match_mode", repr(mm)))
            anchors.append(Anchor(var, txt, label, mm))

    hops: list[Hop] = []
    if hops_raw is None:
        diags.append(Diagnostic("$.hops", "missing required slot"))
    elif not isinstance(hops_raw, list):
        diags.append(Diagnostic("$.hops", "must be a list"))
    else:
        for i, h in enumerate(hops_raw):
            path = f"$.hops[{i}]"
            if not isinstance(h, dict):
                diags.append(Diagnostic(path, "must be an object"))
                continue
            n = len(diags)
            vals = [_str(h, k, path, diags) for k in ("from", "rel", "to_var", "to_label")]
            if len(diags) > n:
                continue
            if not vals[0] or not vals[2]:
                diags.append(Diagnostic(path, "variable identifiers must be non-empty"))
                continue
            hops.append(Hop(*vals))

    target = None
    if target_raw is None:
        if not skip:
            diags.append(Diagnostic("$.target", "missing required slot"))
    elif not isinstance(target_raw, dict):
        diags.append(Diagnostic("$.target", "must be an object"))
    else:
        n = len(diags)
        tvar = _str(target_raw, "var", "$.target", diags)
        rel_text = _str(target_raw, "relevance_text", "$.target", diags, required=False)
        labels = target_raw.get("labels")
        if labels is None:
            diags.append(Diagnostic("$.target.labels", "missing required slot"))
        elif (
            not isinstance(labels, list)
            or not labels
            or not all(isinstance(x, str) for x in labels)
        ):
            diags.append(Diagnostic("$.target.labels", "must be a non-empty list of labels"))
        if len(diags) == n:
            if not tvar:
                diags.append(Diagnostic("$.target.var", "must be non-empty"))
            target = Target(tvar, tuple(dict.fromkeys(labels)), rel_text or "")

    if diags:
        raise PlanError(diags)

    extra = {k: v for k, v in doc.items() if k not in _TOP_KEYS}
    plan = Plan(tuple(anchors), tuple(hops), target, risk, mode, extra)
    diags = _structural(plan) + validate_against_schema(plan, schema)
    if diags:
        raise PlanError(diags)
    return plan


def _structural(plan: Plan) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    seen: set[str] = set()
    for i, a in enumerate(plan.anchors):
        if a.var in seen:
            diags.append(Diagnostic(f"$.anchors[{i}].var", "duplicate anchor var", a.var))
        seen.add(a.var)

    if plan.is_skip:
        if plan.anchors or plan.hops:
            diags.append(Diagnostic("$", "skip plan must carry no anchors or hops"))
        return diags
    tvar = plan.target.var

    # A hop may start from an anchor, the target, or a variable an earlier hop introduced.
    known = set(seen) | {tvar}
    for i, h in enumerate(plan.hops):
        if h.src not in known:
            diags.append(Diagnostic(f"$.hops[{i}].from", "dangling variable reference", h.src))
        known.add(h.to_var)

    if plan.hops and not any(tvar in (h.src, h.to_var) for h in plan.hops):
        diags.append(Diagnostic("$.target.var", "target var appears in no hop", tvar))

    if plan.is_doc_search:
        if plan.hops:
            diags.append(Diagnostic("$.hops", "doc_search plan must have no hops"))
        if len(plan.anchors) != 1:
            diags.append(Diagnostic("$.anchors", "doc_search plan needs exactly one anchor"))
        elif plan.anchors[0].var != tvar or plan.anchors[0].match_mode != "doc":
            diags.append(
                Diagnostic("$.anchors[0]", "doc_search anchor must be doc-mode on the target var")
            )

    # Every variable must be connected to the target through hops.
    parent = {v: v for v in known | seen}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for h in plan.hops:
        if h.src in parent and h.to_var in parent:
            parent[find(h.src)] = find(h.to_var)
    root = find(tvar)
    loose = sorted(v for v in parent if find(v) != root)
    if loose:
        diags.append(
            Diagnostic("$.hops", "disconnected component", "not linked to target: " + ", ".join(loose))
        )
    return diags


def var_labels(plan: Plan) -> dict[str, set[str]]:
    """Possible node labels per plan variable (anchor label, hop to_label, target labels)."""
    labels: dict[str, set[str]] = {}
    if plan.target is not None:
        labels[plan.target.var] = set(plan.target.labels)
    constraints = [(a.var, a.label) for a in plan.anchors]
    constraints += [(h.to_var, h.to_label) for h in plan.hops]
    for var, lab in constraints:
        labels[var] = labels[var] & {lab} if var in labels else {lab}
    return labels


def validate_against_schema(plan: Plan, schema: SkbSchema) -> list[Diagnostic]:
    """Label, relation and endpoint-constraint checks; empty list means conformant."""
    diags: list[Diagnostic] = []
    for i, a in enumerate(plan.anchors):
        if a.label not in schema.node_types:
            diags.append(Diagnostic(f"$.anchors[{i}].label", "unknown label", a.label))
    if plan.target is not None:
        for lab in plan.target.labels:
            if lab not in schema.node_types:
                diags.append(Diagnostic("$.target.labels", "unknown label", lab))
    for i, h in enumerate(plan.hops):
        if h.rel not in schema.relation_types:
            diags.append(Diagnostic(f"$.hops[{i}].rel", "unknown relation", h.rel))
        if h.to_label not in schema.node_types:
            diags.append(Diagnostic(f"$.hops[{i}].to_label", "unknown label", h.to_label))
    if diags:
        return diags

    labels = var_labels(plan)
    for var, labs in labels.items():
        if not labs:
            diags.append(Diagnostic("$", "conflicting labels for variable", var))
    if diags:
        return diags
    for i, h in enumerate(plan.hops):
        src_labels = labels.get(h.src, set())
        if not any(schema.endpoint_ok(h.rel, s, h.to_label) for s in src_labels):
            diags.append(
                Diagnostic(
                    f"$.hops[{i}]",
                    "endpoint constraint violated",
                    f"{sorted(src_labels)} -{h.rel}- {h.to_label}",
                )
            )
    return diags
