"""Ranking permutations and NDCG."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scorer import score_query


@dataclass(frozen=True)
class RankPermutation:
    """``order[r]`` is the index of the item placed at rank ``r`` (0-based)."""

    order: np.ndarray

    def inverse(self) -> np.ndarray:
        """Rank position of each item."""
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return inv

    def __len__(self):
        return int(self.order.size)


def rank(scores) -> RankPermutation:
    """Stable descending sort; equal scores keep ascending index order."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("rank needs a non-empty vector of scores")
    return RankPermutation(np.argsort(-s, kind="stable"))


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))


def dcg(gains_in_rank_order: np.ndarray, k: int) -> float:
    g = gains_in_rank_order[:k]
    return float(np.dot(np.exp2(g) - 1.0, _discounts(g.size)))


def ndcg(labels, perm: RankPermutation, k: int | None = None) -> float:
    """NDCG@k with gain ``2^y - 1`` and discount ``1/log2(rank + 1)``.

    ``k=None`` means the full list. Lists whose labels are all zero score 1.0.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != perm.order.shape:
        raise ValueError(f"{y.size} labels for a permutation of {len(perm)} items")
    if k is None:
        k = y.size
    if k < 1:
        raise ValueError("k must be a positive integer")
    ideal = dcg(np.sort(y)[::-1], k)
    if ideal == 0.0:
        return 1.0
    return min(dcg(y[perm.order], k) / ideal, 1.0)


def mean_ndcg(dataset, scorer, k: int | None = None, skip_zero_label_queries: bool = False) -> float:
    """Unweighted mean of per-query NDCG@k.

    Summation uses ``math.fsum`` so the mean does not depend on query order.
    """
    values = per_query_ndcg(dataset, scorer, k, skip_zero_label_queries)
    if not values:
        raise ValueError("mean_ndcg needs at least one query")
    return math.fsum(values) / len(values)


def per_query_ndcg(dataset, scorer, k=None, skip_zero_label_queries=False) -> list[float]:
    out = []
    for q in dataset.queries:
        if skip_zero_label_queries and not np.any(q.labels > 0):
            continue
        out.append(ndcg(q.labels, rank(score_query(scorer, q.features, q.qid)), k))
    return out
