"""Prompt packs and a small OpenAI-compatible chat client for planning and scoring.

Nothing here needs a network when a :class:`MockTransport` is installed, which
is how the tests and demos run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Mapping, Protocol, Sequence

from .plan import Plan, PlanError, parse_plan, plan_from_dict, skip_plan
from .skb import SkbSchema

__all__ = [
    "PromptPack",
    "PackError",
    "ClientConfig",
    "TransportError",
    "AuthError",
    "HttpTransport",
    "MockTransport",
    "load_pack",
    "pack_names",
    "render_schema_block",
    "assemble_prompt",
    "generate_plan",
    "score_yes",
    "yes_probability",
    "message_key",
    "LlmPlanner",
    "LlmScorer",
    "MockPlanner",
    "QUERY_SLOT",
]

log = logging.getLogger(__name__)

QUERY_SLOT = "<query string>"
_PACKS = {
    "amazon": ("amazon_system.txt",),
    "mag": ("mag_system.txt",),
    "prime": ("prime_system.txt", "prime_examples.txt"),
}


class PackError(ValueError):
    pass


@dataclass(frozen=True)
class PromptPack:
    """Everything needed to build a planner prompt for one dataset.

    ``system_blocks`` are joined by a blank line and followed by the shared
    fusion-control block.
    """

    name: str
    system_blocks: tuple[str, ...]
    fusion_control_block: str
    user_preamble: str
    risk_addendum: str
    reranker_instruction: str = ""

    def __post_init__(self):
        if not self.system_blocks or not all(b.strip() for b in self.system_blocks):
            raise PackError(f"{self.name}: empty system block")
        if self.user_preamble.count(QUERY_SLOT) != 1:
            raise PackError(f"{self.name}: user preamble needs exactly one {QUERY_SLOT} slot")
        if not self.fusion_control_block.strip() or not self.risk_addendum.strip():
            raise PackError(f"{self.name}: missing shared blocks")

    def digest(self) -> str:
        """Hash of the assembled prompt template, for drift detection."""
        system, user = assemble_prompt(self, "{q}")
        return hashlib.sha256((system + "\x00" + user).encode("utf-8")).hexdigest()


def _asset(name: str) -> str:
    return resources.files("skbrank.assets").joinpath(name).read_bytes().decode("utf-8")


def _checked_asset(name: str, sums: Mapping[str, str]) -> str:
    text = _asset(name)
    want = sums.get(name)
    got = hashlib.sha256(text.encode("utf-8")).hexdigest()
    if want != got:
        raise PackError(f"asset {name} does not match its checksum")
    return text


def pack_names() -> tuple[str, ...]:
    return tuple(sorted(_PACKS))


def load_pack(name: str) -> PromptPack:
    if name not in _PACKS:
        raise PackError(f"unknown prompt pack {name!r}; choose from {', '.join(pack_names())}")
    sums = json.loads(_asset("checksums.json"))
    blocks = tuple(_checked_asset(f, sums) for f in _PACKS[name])
    return PromptPack(
        name=name,
        system_blocks=blocks,
        fusion_control_block=_checked_asset("fusion_control.txt", sums),
        user_preamble=_checked_asset(f"{name}_user.txt", sums),
        risk_addendum=_checked_asset("risk_addendum.txt", sums),
        reranker_instruction=_checked_asset(f"{name}_reranker.txt", sums),
    )


def render_schema_block(schema: SkbSchema) -> str:
    """Schema section for packs built for a new SKB."""
    lines = ["## Node labels", ", ".join(sorted(schema.node_types)), "", "## Relations (all undirected)"]
    for rel in schema.relation_types:
        pairs = sorted(schema.endpoint_constraints.get(rel, ()))
        if not pairs:
            lines.append(f"- <any> -{rel}- <any>")
        for a, b in pairs:
            lines.append(f"- {a} -{rel}- {b}")
    return "\n".join(lines)


def assemble_prompt(pack: PromptPack, query: str) -> tuple[str, str]:
    if not query or not query.strip():
        raise ValueError("query must be non-empty")
    system = "\n\n".join((*pack.system_blocks, pack.fusion_control_block))
    user = pack.user_preamble.replace(QUERY_SLOT, query) + "\n\n" + pack.risk_addendum
    return system, user


@dataclass(frozen=True)
class ClientConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "planner"
    api_key_env: str = "SKBRANK_API_KEY"
    timeout: float = 60.0
    max_retries: int = 2
    max_in_flight: int = 8
    temperature: float = 0.0
    retry_with_diagnostics: bool = False
    backoff_base: float = 0.5

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ClientConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown client settings: {', '.join(sorted(unknown))}")
        return cls(**doc)


class TransportError(RuntimeError):
    pass


class AuthError(TransportError):
    pass


Messages = Sequence[Mapping[str, str]]


class Transport(Protocol):
    def chat(self, messages: Messages, **params) -> dict:
        """Return the chat-completions response body."""


class HttpTransport:
    """POST ``{endpoint}/chat/completions`` with bounded concurrency and backoff."""

    def __init__(self, config: ClientConfig, client=None, sleep: Callable[[float], None] = time.sleep):
        import httpx

        self.config = config
        self._httpx = httpx
        self._client = client or httpx.Client(timeout=config.timeout)
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._sleep = sleep

    def _headers(self) -> dict:
        key = os.environ.get(self.config.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def chat(self, messages: Messages, **params) -> dict:
        cfg = self.config
        body = {"model": cfg.model, "messages": list(messages), "temperature": cfg.temperature, **params}
        url = cfg.endpoint.rstrip("/") + "/chat/completions"
        last = "no attempt made"
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self._sleep(cfg.backoff_base * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self._client.post(url, json=body, headers=self._headers())
            except self._httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                retry_after = resp.headers.get("retry-after")
                if retry_after and retry_after.replace(".", "", 1).isdigit():
                    self._sleep(float(retry_after))
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError:
                last = "response is not JSON"
        raise TransportError(f"giving up after {cfg.max_retries + 1} attempts ({last})")


def message_key(messages: Messages) -> str:
    blob = json.dumps(list(messages), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def completion(text: str, logprobs: Mapping[str, float] | None = None) -> dict:
    """Minimal chat-completions response body."""
    choice: dict = {"index": 0, "message": {"role": "assistant", "content": text}}
    if logprobs is not None:
        top = [{"token": t, "logprob": lp} for t, lp in logprobs.items()]
        choice["logprobs"] = {"content": [{"token": text, "logprob": 0.0, "top_logprobs": top}]}
    return {"choices": [choice]}


class MockTransport:
    """Replays canned responses keyed by :func:`message_key` of the request.

    Values may be full response bodies, plain strings (the completion text), or
    lists of either, which are served in turn for repeated requests.
    """

    def __init__(self, responses: Mapping[str, object] | None = None, default=None):
        self.responses = dict(responses or {})
        self.default = default
        self.calls: list[str] = []
        self._served: dict[str, int] = {}
        self._lock = threading.Lock()

    def add(self, messages: Messages, response) -> str:
        key = message_key(messages)
        self.responses[key] = response
        return key

    @classmethod
    def from_file(cls, path) -> "MockTransport":
        """JSONL lines of ``{"key": ..., "response": ...}``."""
        table = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip() and not line.startswith("#"):
                    rec = json.loads(line)
                    table[rec["key"]] = rec["response"]
        return cls(table)

    def chat(self, messages: Messages, **params) -> dict:
        key = message_key(messages)
        with self._lock:
            self.calls.append(key)
            value = self.responses.get(key, self.default)
            if isinstance(value, list):
                i = self._served.get(key, 0)
                self._served[key] = i + 1
                value = value[min(i, len(value) - 1)]
        if value is None:
            raise TransportError(f"no mock response for request {key[:12]}")
        if isinstance(value, Exception):
            raise value
        return completion(value) if isinstance(value, str) else dict(value)


def _content(resp: Mapping) -> str:
    try:
        return resp["choices"][0]["message"]["content"] or ""
    except (KeyError, IndexError, TypeError):
        raise TransportError("malformed chat response") from None


def generate_plan(
    query: str,
    pack: PromptPack,
    transport: Transport,
    schema: SkbSchema,
    config: ClientConfig = ClientConfig(),
    diagnostics: list[str] | None = None,
) -> Plan:
    """Ask for a plan, retrying unparseable output; fall back to a skip plan.

    Only :class:`AuthError` escapes. Everything else ends as a skip plan with
    the reason appended to ``diagnostics``.
    """
    diags = diagnostics if diagnostics is not None else []
    system, user = assemble_prompt(pack, query)
    turn = user
    for attempt in range(config.max_retries + 1):
        messages = [{"role": "system", "content": system}, {"role": "user", "content": turn}]
        try:
            text = _content(transport.chat(messages))
        except AuthError:
            raise
        except TransportError as exc:
            diags.append(f"planner transport failed: {exc}")
            return skip_plan()
        try:
            return parse_plan(text, schema)
        except PlanError as exc:
            problems = [str(d) for d in exc.diagnostics]
            diags.append(f"attempt {attempt + 1}: plan rejected: " + "; ".join(problems))
            if config.retry_with_diagnostics:
                turn = user + "\n\nYour previous plan was rejected:\n" + "\n".join(
                    f"- {p}" for p in problems
                )
    diags.append("falling back to skip plan")
    return skip_plan()


def _norm_token(tok: str) -> str:
    return tok.strip().lower()


def yes_probability(resp: Mapping) -> float:
    """Two-way softmax over the yes/no log-probs, else a literal yes/no mapping."""
    choice = resp["choices"][0]
    lp: dict[str, float] = {}
    content = (choice.get("logprobs") or {}).get("content") or []
    if content:
        for entry in content[0].get("top_logprobs") or []:
            tok = _norm_token(entry["token"])
            if tok in ("yes", "no"):
                lp[tok] = max(lp.get(tok, -math.inf), float(entry["logprob"]))
    if lp:
        y, n = lp.get("yes", -math.inf), lp.get("no", -math.inf)
        m = max(y, n)
        ey, en = math.exp(y - m), math.exp(n - m)
        return ey / (ey + en)
    word = _norm_token(_content(resp)).strip(".!")
    if word == "yes":
        return 1.0
    if word == "no":
        return 0.0
    raise TransportError(f"completion is neither yes nor no: {word[:40]!r}")


def score_yes(query: str, document: str, system_instruction: str, transport: Transport) -> float:
    messages = [
        {"role": "system", "content": system_instruction},
        {"role": "user", "content": query},
        {"role": "user", "content": document},
    ]
    resp = transport.chat(messages, max_tokens=1, logprobs=True, top_logprobs=5)
    return yes_probability(resp)


class LlmScorer:
    """Reranker :class:`~skbrank.rerank.Scorer` backed by a chat transport."""

    def __init__(self, transport: Transport):
        self.transport = transport

    def score(self, query: str, document: str, system_instruction: str = "") -> float:
        return score_yes(query, document, system_instruction, self.transport)


@dataclass
class LlmPlanner:
    pack: PromptPack
    transport: Transport
    schema: SkbSchema
    config: ClientConfig = ClientConfig()
    diagnostics: dict[str, list[str]] = field(default_factory=dict)

    def __call__(self, qid: str, query: str) -> Plan:
        diags = self.diagnostics.setdefault(qid, [])
        return generate_plan(query, self.pack, self.transport, self.schema, self.config, diags)


class MockPlanner:
    """Serves fixture plans by qid. Values are raw strings or plan objects.

    Raw strings go through the normal parser, so broken fixtures exercise the
    failure path. An unknown qid raises ``KeyError``.
    """

    def __init__(self, plans: Mapping[str, str | Mapping]):
        self.plans = dict(plans)

    @classmethod
    def from_file(cls, path) -> "MockPlanner":
        """JSONL lines of ``{"qid": ..., "plan": <object or raw string>}``."""
        plans = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip() and not line.startswith("#"):
                    rec = json.loads(line)
                    plans[str(rec["qid"])] = rec["plan"]
        return cls(plans)

    def __call__(self, qid: str, query: str):
        value = self.plans[qid]
        if isinstance(value, str):
            return value
        return json.dumps(value)

    def plan(self, qid: str, schema: SkbSchema) -> Plan:
        value = self.plans[qid]
        return parse_plan(value, schema) if isinstance(value, str) else plan_from_dict(value, schema)
