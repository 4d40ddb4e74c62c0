"""Text embedders and per-(label, mode) cosine vector indices.

``name`` indices embed a node's first text field; ``doc`` indices embed all of
its text fields, truncated to ``doc_max_len`` whitespace tokens.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .skb import SkbGraph, SkbNode, SkbSchema

__all__ = [
    "Embedder",
    "EmbedError",
    "HashEmbedder",
    "RemoteEmbedder",
    "VectorIndex",
    "AnchorBinding",
    "cosine",
    "truncate_tokens",
    "index_text",
    "build_index",
    "link_anchor",
    "link_anchor_exact",
]

log = logging.getLogger(__name__)

MODES = ("name", "doc")
DEFAULT_DOC_MAX_LEN = 512


class EmbedError(RuntimeError):
    pass


class Embedder(Protocol):
    dim: int
    tag: str

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return an ``(len(texts), dim)`` array of L2-normalized rows."""


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return m / norms


_PUNCT = re.compile(r"^\W+|\W+$")


class HashEmbedder:
    """Deterministic bag-of-tokens embedder for tests and offline runs.

    Each lowercased whitespace token (edge punctuation stripped) is hashed with
    BLAKE2b into one of ``dim`` buckets; counts are L2-normalized. Texts with
    no tokens map to the zero vector, which has similarity 0 to everything.
    """

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.tag = f"hash-{dim}"

    def bucket(self, token: str) -> int:
        h = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(h, "little") % self.dim

    def tokens(self, text: str) -> list[str]:
        out = []
        for raw in text.lower().split():
            tok = _PUNCT.sub("", raw)
            if tok:
                out.append(tok)
        return out

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        m = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            for tok in self.tokens(text):
                m[i, self.bucket(tok)] += 1.0
        return _normalize_rows(m)


class RemoteEmbedder:
    """OpenAI-compatible ``/embeddings`` client.

    Request ``{"model", "input": [...]}``; response ``{"data": [{"embedding"}]}``.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        dim: int,
        api_key_env: str = "SKBRANK_API_KEY",
        timeout: float = 60.0,
        batch_size: int = 64,
        transport=None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.dim = dim
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.batch_size = batch_size
        self.tag = f"remote:{model}"
        self._transport = transport

    def _post(self, payload: dict) -> dict:
        if self._transport is not None:
            return self._transport(payload)
        import httpx

        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        resp = httpx.post(
            f"{self.endpoint}/embeddings", json=payload, headers=headers, timeout=self.timeout
        )
        resp.raise_for_status()
        return resp.json()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for start in range(0, len(texts), self.batch_size):
            batch = list(texts[start : start + self.batch_size])
            try:
                data = self._post({"model": self.model, "input": batch})["data"]
                vecs = [d["embedding"] for d in data]
            except Exception as exc:
                raise EmbedError(f"embedding request failed: {exc}") from exc
            if len(vecs) != len(batch):
                raise EmbedError(f"expected {len(batch)} embeddings, got {len(vecs)}")
            rows.extend(vecs)
        m = np.asarray(rows, dtype=np.float64).reshape(len(texts), -1)
        if m.shape[1] != self.dim and len(texts):
            raise EmbedError(f"expected dimension {self.dim}, got {m.shape[1]}")
        return _normalize_rows(m)


def truncate_tokens(text: str, max_tokens: int | None) -> str:
    toks = text.split()
    if max_tokens is not None:
        toks = toks[:max_tokens]
    return " ".join(toks)


def index_text(node: SkbNode, schema: SkbSchema, mode: str, doc_max_len: int | None) -> str:
    """The exact text embedded for ``node`` in a ``mode`` index."""
    fields = schema.fields_of(node.label)
    if mode == "name":
        return node.text(fields[0]) if fields else ""
    if mode == "doc":
        joined = " ".join(node.text(f) for f in fields if node.text(f))
        return truncate_tokens(joined, doc_max_len)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class AnchorBinding:
    node: str
    score: float


_MAGIC = b"SKBVIDX1"


@dataclass(frozen=True, eq=False)
class VectorIndex:
    label: str
    mode: str
    dim: int
    doc_max_len: int | None
    embedder_tag: str
    ids: tuple[str, ...]
    # float32, shape (len(ids), dim), unit rows (or zero rows for empty texts).
    vectors: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VectorIndex):
            return NotImplemented
        return (
            self.header() == other.header()
            and self.vectors.dtype == other.vectors.dtype
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    def header(self) -> dict:
        return {
            "label": self.label,
            "mode": self.mode,
            "dim": self.dim,
            "doc_max_len": self.doc_max_len,
            "embedder": self.embedder_tag,
            "ids": list(self.ids),
        }

    def position(self, node_id: str) -> int | None:
        if not hasattr(self, "_pos"):
            object.__setattr__(self, "_pos", {nid: i for i, nid in enumerate(self.ids)})
        return self._pos.get(node_id)

    def vector(self, node_id: str) -> np.ndarray | None:
        i = self.position(node_id)
        return None if i is None else self.vectors[i]

    def similarities(self, query_vec: np.ndarray) -> np.ndarray:
        q = np.asarray(query_vec, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query dimension {q.shape} does not match index dim {self.dim}")
        if not hasattr(self, "_rows"):
            rows = self.vectors.astype(np.float64)
            object.__setattr__(self, "_rows", rows)
            object.__setattr__(self, "_norms", np.linalg.norm(rows, axis=1))
        qn = np.linalg.norm(q)
        if qn == 0:
            return np.zeros(len(self.ids))
        # Dot first, divide after, as in ``cosine``: exact ties stay exact.
        denom = self._norms * qn
        dots = self._rows @ q
        safe = np.where(denom > 0, denom, 1.0)
        return np.where(denom > 0, np.clip(dots / safe, -1.0, 1.0), 0.0)

    def save(self, path) -> None:
        head = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        body = np.ascontiguousarray(self.vectors, dtype="<f4").tobytes()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            fh.write(body)

    @classmethod
    def load(cls, path) -> "VectorIndex":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != _MAGIC:
            raise ValueError(f"{path}: not a vector index file")
        (hlen,) = struct.unpack("<I", blob[8:12])
        head = json.loads(blob[12 : 12 + hlen])
        n, d = len(head["ids"]), head["dim"]
        vecs = np.frombuffer(blob[12 + hlen :], dtype="<f4")
        if vecs.size != n * d:
            raise ValueError(f"{path}: truncated vector block")
        return cls(
            label=head["label"],
            mode=head["mode"],
            dim=d,
            doc_max_len=head["doc_max_len"],
            embedder_tag=head["embedder"],
            ids=tuple(head["ids"]),
            vectors=vecs.reshape(n, d).astype(np.float32),
        )


def build_index(
    graph: SkbGraph,
    embedder: Embedder,
    label: str,
    mode: str,
    doc_max_len: int | None = DEFAULT_DOC_MAX_LEN,
    batch_size: int = 256,
    max_workers: int = 1,
) -> VectorIndex:
    if label not in graph.schema.node_types:
        raise KeyError(f"unknown label {label!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    ids = graph.ids_with_label(label)
    texts = [index_text(graph.node(nid), graph.schema, mode, doc_max_len) for nid in ids]
    batches = [range(s, min(s + batch_size, len(ids))) for s in range(0, len(ids), batch_size)]

    def run(rng: range) -> np.ndarray:
        try:
            return embedder.embed([texts[i] for i in rng])
        except Exception as exc:
            raise EmbedError(
                f"embedding failed for {label}/{mode} nodes {ids[rng.start]}..{ids[rng.stop - 1]}: {exc}"
            ) from exc

    if max_workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            parts = list(pool.map(run, batches))
    else:
        parts = [run(b) for b in batches]
    vecs = np.vstack(parts) if parts else np.zeros((0, embedder.dim))
    return VectorIndex(
        label=label,
        mode=mode,
        dim=embedder.dim,
        doc_max_len=doc_max_len if mode == "doc" else None,
        embedder_tag=embedder.tag,
        ids=tuple(ids),
        vectors=vecs.astype(np.float32),
    )


def _filter(scored: list[tuple[str, float]], k: int | None, tau: float) -> list[AnchorBinding]:
    scored.sort(key=lambda p: (-p[1], p[0]))
    if k is not None:
        scored = scored[:k]
    if not scored:
        return []
    top = scored[0][1]
    # A non-positive top-1 would make the ratio drop the top-1 itself; skip the filter.
    floor = tau * top if top > 0 else -np.inf
    return [AnchorBinding(nid, s) for nid, s in scored if s >= floor]


def link_anchor(
    index: VectorIndex,
    embedder: Embedder,
    query_text: str,
    k: int | None,
    tau: float,
    diagnostics: list[str] | None = None,
) -> list[AnchorBinding]:
    """Top-``k`` index entries by cosine, keeping those within ``tau`` of the top-1.

    ``k=None`` keeps every entry (used for whole-corpus doc search).
    """
    if k is not None and k < 1:
        raise ValueError("K must be >= 1")
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    if len(index) == 0:
        if diagnostics is not None:
            diagnostics.append(f"empty index {index.label}/{index.mode}: no bindings for {query_text!r}")
        return []
    q = embedder.embed([query_text])[0]
    sims = index.similarities(q)
    if k is not None and k < len(sims):
        # Everything tied with the k-th value must survive the partition for id tie-breaks.
        kth = np.partition(-sims, k - 1)[k - 1]
        keep = np.nonzero(-sims <= kth)[0]
    else:
        keep = np.arange(len(sims))
    scored = [(index.ids[i], float(sims[i])) for i in keep]
    return _filter(scored, k, tau)


def link_anchor_exact(
    index: VectorIndex, embedder: Embedder, query_text: str, k: int | None, tau: float
) -> list[AnchorBinding]:
    """Brute-force reference: per-entry ``cosine`` then the same K/tau rule."""
    if len(index) == 0:
        return []
    q = embedder.embed([query_text])[0]
    scored = []
    for nid, vec in zip(index.ids, index.vectors):
        try:
            s = cosine(q, vec)
        except ValueError:
            s = 0.0
        scored.append((nid, s))
    return _filter(scored, k, tau)
