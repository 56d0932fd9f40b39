"""Pure-Python graph search kernels (fallback for the compiled ``_ann_ext``).

Both kernels share one contract with the compiled version:

``search_layer(vectors, adj, counts, query, entries, ef)``
    Best-first beam search over one graph layer. ``adj`` is an ``[n, cap]``
    int64 neighbour table whose first ``counts[i]`` entries are valid.
    Returns ``(ids, sims)`` of the best ``ef`` nodes found, ordered by
    similarity descending then id ascending.

``select_neighbors(vectors, cand_ids, cand_sims, m)``
    Diversity heuristic: walk candidates best-first and keep one only if it
    is closer to the base point than to every neighbour already kept; fill
    any remaining slots with the best discarded candidates.
"""

from __future__ import annotations

import heapq

import numpy as np


def search_layer(vectors, adj, counts, query, entries, ef):
    q = query.tolist()
    rows = vectors
    visited = set()
    cand: list[tuple[float, int]] = []
    best: list[tuple[float, int]] = []  # min-heap keyed (sim, -id): root is the worst kept
    for e in entries:
        e = int(e)
        if e in visited:
            continue
        visited.add(e)
        s = _dot_list(rows[e], q)
        heapq.heappush(cand, (-s, e))
        heapq.heappush(best, (s, -e))
        if len(best) > ef:
            heapq.heappop(best)
    while cand:
        neg_s, c = heapq.heappop(cand)
        if len(best) >= ef and -neg_s < best[0][0]:
            break
        row = adj[c]
        for k in range(int(counts[c])):
            e = int(row[k])
            if e in visited:
                continue
            visited.add(e)
            s = _dot_list(rows[e], q)
            if len(best) < ef or (s, -e) > best[0]:
                heapq.heappush(cand, (-s, e))
                heapq.heappush(best, (s, -e))
                if len(best) > ef:
                    heapq.heappop(best)
    out = sorted(((s, -ni) for s, ni in best), key=lambda t: (-t[0], t[1]))
    ids = np.array([i for _, i in out], dtype=np.int64)
    sims = np.array([s for s, _ in out], dtype=np.float64)
    return ids, sims


def _dot_list(row: np.ndarray, q: list) -> float:
    s = 0.0
    for x, y in zip(row.tolist(), q):
        s += x * y
    return s


def select_neighbors(vectors, cand_ids, cand_sims, m):
    cand_ids = [int(c) for c in cand_ids]
    if len(cand_ids) <= m:
        return np.array(cand_ids, dtype=np.int64)
    kept: list[int] = []
    dropped: list[int] = []
    for c, s in zip(cand_ids, cand_sims):
        if len(kept) >= m:
            break
        vc = vectors[c].tolist()
        if all(_dot_list(vectors[r], vc) < s for r in kept):
            kept.append(c)
        else:
            dropped.append(c)
    for c in dropped:
        if len(kept) >= m:
            break
        kept.append(c)
    return np.array(kept, dtype=np.int64)
