"""Plan-guided retrieval over semi-structured knowledge bases.

Stage 1 turns a query into a typed graph pattern and ranks the matches, stage 2
fuses that ranking with a dense run, and stage 3 reranks the fused head.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .evaluation import GoldSet, evaluate, hit_at_k, mrr, recall_at_k
from .execute import compile_plan, emit_cypher, execute, stage1
from .fusion import DynamicRrfConfig, StaticRrfConfig, dynamic_weight, grid_search, rrf_dynamic, rrf_static
from .plan import Plan, PlanError, parse_plan
from .ranking import QueryMeta, RankedList, read_run, write_run
from .rerank import SerializationCaps, listwise_loss, serialize_candidate
from .skb import SkbGraph, SkbSchema, load_skb

__all__ = [
    "GoldSet", "evaluate", "hit_at_k", "mrr", "recall_at_k",
    "compile_plan", "emit_cypher", "execute", "stage1",
    "DynamicRrfConfig", "StaticRrfConfig", "dynamic_weight", "grid_search", "rrf_dynamic", "rrf_static",
    "Plan", "PlanError", "parse_plan",
    "QueryMeta", "RankedList", "read_run", "write_run",
    "SerializationCaps", "listwise_loss", "serialize_candidate",
    "SkbGraph", "SkbSchema", "load_skb",
]
