"""Read-only JSON endpoint over prebuilt artifacts.

``POST /retrieve`` with ``{"query": ..., "qid": optional}`` returns the ranked
candidates with the score each stage gave them. ``GET /health`` answers ``ok``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping

from .execute import Planner, stage1
from .fusion import DynamicRrfConfig, StaticRrfConfig, fuse_runs
from .pipeline import Artifacts, PipelineSettings
from .ranking import RankedList
from .rerank import Scorer, SerializationCaps, rerank_and_fuse

__all__ = ["RetrievalService", "make_server"]

log = logging.getLogger(__name__)


@dataclass
class RetrievalService:
    art: Artifacts
    planner: Planner
    settings: PipelineSettings = PipelineSettings()
    dense: Mapping[str, RankedList] | None = None
    fusion: StaticRrfConfig | DynamicRrfConfig | None = None
    scorer: Scorer | None = None
    rerank_cfg: StaticRrfConfig | None = None
    caps: SerializationCaps = SerializationCaps()
    depth: int = 100
    system_instruction: str = ""
    top: int = 20

    def handle(self, request: Mapping) -> dict:
        query = request.get("query")
        if not isinstance(query, str) or not query.strip():
            raise ValueError("request needs a non-empty 'query' string")
        qid = str(request.get("qid", "q"))
        top = int(request.get("top", self.top))
        res = stage1(
            qid,
            query,
            self.planner,
            self.art.graph,
            self.art.indices,
            self.art.embedder,
            self.settings.link(),
            self.settings.max_assignments,
        )
        stages: dict[str, RankedList] = {"stage1": res.ranking}
        final = res.ranking
        if self.fusion is not None:
            dense = (self.dense or {}).get(qid, RankedList(qid))
            stages["dense"] = dense
            final = fuse_runs({qid: res.ranking}, {qid: dense}, self.fusion, {qid: res.meta})[qid]
            stages["fused"] = final
        diags = list(res.diagnostics)
        if self.scorer is not None and self.rerank_cfg is not None:
            rr = rerank_and_fuse(
                final, query, self.scorer, self.art.graph, self.rerank_cfg, self.caps,
                self.depth, self.system_instruction,
            )
            stages["reranker"] = rr.reranker_run
            final = rr.ranking
            stages["final"] = final
            diags.extend(rr.diagnostics)
        per_stage = {name: run.scores() for name, run in stages.items()}
        candidates = []
        for rank, (nid, score) in enumerate(final.items[:top], start=1):
            row = {"id": nid, "rank": rank, "score": score}
            row.update({name: s[nid] for name, s in per_stage.items() if nid in s})
            candidates.append(row)
        return {
            "qid": qid,
            "meta": {"n_cand": res.meta.n_cand, "risk_level": res.meta.risk_level, "valid": res.meta.valid},
            "candidates": candidates,
            "diagnostics": diags,
        }


def make_server(service: RetrievalService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def _send(self, code: int, body: dict) -> None:
            data = json.dumps(body).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            if self.path == "/health":
                self._send(200, {"status": "ok"})
            else:
                self._send(404, {"error": "not found"})

        def do_POST(self):
            if self.path != "/retrieve":
                self._send(404, {"error": "not found"})
                return
            try:
                length = int(self.headers.get("Content-Length", 0))
                request = json.loads(self.rfile.read(length) or b"{}")
                self._send(200, service.handle(request))
            except (ValueError, TypeError) as exc:
                self._send(400, {"error": str(exc)})
            except Exception as exc:  # keep serving
                log.exception("request failed")
                self._send(500, {"error": type(exc).__name__})

        def log_message(self, fmt, *args):
            log.info("%s %s", self.address_string(), fmt % args)

    return ThreadingHTTPServer((host, port), Handler)
