"""Offline matching metrics: Recall@K, AUC, diversity and irrelevant ratios, Relscore@K.

Degree lookups accept either a mapping ``{(query_id, image_id): degree}`` or
a callable ``degree(query_id, image_id)``; a missing degree is an error, never
a silent zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError

DegreeLookup = Mapping | Callable[[int, int], int]


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple = (1, 5, 10)
    query_sample: int | None = None
    top_m: int = 15
    irrelevant_degree: int = 0
    seed: int = 0

    def __post_init__(self):
        ks = tuple(int(k) for k in self.ks)
        if not ks or any(k < 1 for k in ks) or list(ks) != sorted(set(ks)):
            raise ValidationError(f"ks must be positive and strictly ascending, got {self.ks}")
        object.__setattr__(self, "ks", ks)
        if self.top_m < 1:
            raise ValidationError(f"top_m must be >= 1, got {self.top_m}")
        if self.query_sample is not None and self.query_sample < 1:
            raise ValidationError("query_sample must be >= 1 when given")

    def to_dict(self) -> dict:
        return {"ks": list(self.ks), "query_sample": self.query_sample, "top_m": self.top_m,
                "irrelevant_degree": self.irrelevant_degree, "seed": self.seed}


def recall_at_k(rankings: Sequence[Sequence[int]], truths: Sequence[int | None], k: int) -> float:
    """Mean over queries of 1[truth in top-k]."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(rankings) == 0:
        raise ValidationError("recall_at_k needs at least one ranking")
    if len(rankings) != len(truths):
        raise ValidationError(f"{len(rankings)} rankings but {len(truths)} ground-truth ids")
    hits = 0
    for ranked, truth in zip(rankings, truths):
        if truth is None:
            raise ValidationError("missing ground truth for a query")
        hits += int(truth) in [int(x) for x in list(ranked)[:k]]
    return hits / len(rankings)


def auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted one half.

    Exact enumeration of every (positive, negative) pair, in blocks.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValidationError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ValidationError("labels must be binary (0/1 or bool)")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("auc needs both classes present")
    wins = 0.0
    block = max(1, 4_000_000 // neg.size)
    for start in range(0, pos.size, block):
        p = pos[start:start + block, None]
        wins += float(np.sum(p > neg[None, :])) + 0.5 * float(np.sum(p == neg[None, :]))
    return wins / (pos.size * neg.size)


def _catalog_set(catalog) -> set[int]:
    if isinstance(catalog, (int, np.integer)):
        if catalog < 1:
            raise ValidationError(f"catalog size must be >= 1, got {catalog}")
        return set(range(int(catalog)))
    ids = {int(i) for i in catalog}
    if not ids:
        raise ValidationError("catalog must contain at least one image")
    return ids


def diversity_ratio(retrieved: Iterable[Iterable[int]], catalog) -> float:
    """|union of retrieved ids| / catalog size. ``catalog`` is a size (ids 0..n-1) or an id collection."""
    cat = _catalog_set(catalog)
    seen: set[int] = set()
    for row in retrieved:
        for i in row:
            i = int(i)
            if i not in cat:
                raise ValidationError(f"retrieved id {i} is not in the catalog")
            seen.add(i)
    return len(seen) / len(cat)


def _degree(lookup: DegreeLookup, q: int, i: int) -> int:
    try:
        d = lookup(q, i) if callable(lookup) else lookup[(q, i)]
    except (KeyError, IndexError) as exc:
        raise ValidationError(f"no relevance degree for pair ({q}, {i})") from exc
    if d is None:
        raise ValidationError(f"no relevance degree for pair ({q}, {i})")
    return int(d)


def irrelevant_ratio(pairs: Iterable[tuple[int, int]], degrees: DegreeLookup,
                     irrelevant_degree: int = 0) -> float:
    """Fraction of returned (query, image) pairs whose degree is ``irrelevant_degree``."""
    vals = [_degree(degrees, int(q), int(i)) for q, i in pairs]
    if not vals:
        raise ValidationError("irrelevant_ratio needs at least one pair")
    return sum(v == irrelevant_degree for v in vals) / len(vals)


def relscore_at_k(results: Mapping[int, Sequence[int]], degrees: DegreeLookup, k: int = 10) -> float:
    """Mean degree over each query's top-k, averaged over queries (range [0, 2])."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    per_query = []
    for q, ranked in results.items():
        top = list(ranked)[:k]
        if not top:
            continue
        per_query.append(np.mean([_degree(degrees, int(q), int(i)) for i in top]))
    if not per_query:
        raise ValidationError("relscore_at_k needs at least one non-empty result list")
    return float(np.mean(per_query))
