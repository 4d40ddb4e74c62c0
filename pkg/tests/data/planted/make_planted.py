"""Regenerate planted_val.json: 20 validation queries on which only the
planted (w, k) puts every gold item at rank 1 over the default static grid.

Run from the tests directory: python3 data/planted/make_planted.py
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent.parent))

from oracles import naive_order, naive_rrf  # noqa: E402

W = tuple(round(0.05 * i, 2) for i in range(21))
K = (1, 2, 5, 10, 20, 40, 60, 80, 100)
PLANTED = (0.35, 5)


def hits(q):
    out = set()
    for w in W:
        for k in K:
            order = naive_order(naive_rrf(q["g"], q["m"], w, 1 - w, k))
            if w == 0:
                order = [n for n in order if n in q["m"]]
            if w == 1:
                order = [n for n in order if n in q["g"]]
            if order and order[0] == "gold":
                out.add((w, k))
    return out


def random_query(rng):
    ids = [f"n{i:02d}" for i in range(30)] + ["gold"]
    g = [ids[int(i)] for i in rng.permutation(31)[: int(rng.integers(5, 25))]]
    m = [ids[int(i)] for i in rng.permutation(31)[: int(rng.integers(5, 25))]]
    if "gold" not in g:
        g[int(rng.integers(min(4, len(g))))] = "gold"
    if "gold" not in m:
        m[int(rng.integers(min(8, len(m))))] = "gold"
    return {"g": g, "m": m, "gold": ["gold"]}


def main():
    rng = np.random.default_rng(11)
    pool = []
    while len(pool) < 3000:
        q = random_query(rng)
        h = hits(q)
        if PLANTED in h:
            pool.append((q, h))
    chosen, alive = [], {(w, k) for w in W for k in K}
    while len(alive) > 1 and len(chosen) < 20:
        q, h = min(pool, key=lambda qh: len(alive & qh[1]))
        chosen.append(q)
        alive &= h
    while len(chosen) < 20:
        chosen.append(pool[len(chosen)][0])
    assert alive == {PLANTED}, alive
    doc = {"planted": list(PLANTED), "w": list(W), "k": list(K), "queries": chosen}
    (HERE / "planted_val.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(len(chosen), "queries; planted", PLANTED)


if __name__ == "__main__":
    main()
