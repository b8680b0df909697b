"""Listwise losses over the raw scores of one query.

Both losses return ``(loss, d loss / d scores)`` and are invariant to adding
a constant to every score of the list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllZeroLabels, DimensionMismatch
from .numerics import log_softmax


@dataclass(frozen=True)
class LabeledList:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if s.ndim != 1 or s.shape != y.shape or s.size == 0:
            raise DimensionMismatch(f"scores {s.shape} and labels {y.shape} must be equal, non-empty")
        if np.any(y < 0):
            raise ValueError("relevance labels must be >= 0")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)


def listnet_target(labels) -> np.ndarray:
    """Top-one target distribution ``y / sum(y)`` (uniform over relevant items for 0/1 labels)."""
    y = np.asarray(labels, dtype=np.float64)
    total = y.sum()
    if not total > 0:
        raise AllZeroLabels("ListNet needs at least one positive label")
    return y / total


def listnet_loss(l: LabeledList) -> tuple[float, np.ndarray]:
    """Top-one ListNet: cross-entropy between the label target and ``softmax(scores)``."""
    p = listnet_target(l.labels)
    logq = log_softmax(l.scores)
    nz = p > 0
    loss = -float(np.dot(p[nz], logq[nz]))
    grad = np.exp(logq) - p
    return max(loss, 0.0), grad


def _reverse_logcumsumexp(x: np.ndarray) -> np.ndarray:
    # out[r] = log(sum(exp(x[r:])))
    return np.logaddexp.accumulate(x[::-1])[::-1]


def listmle_order(labels, tie_seed: int) -> np.ndarray:
    """Items by label descending, ties broken by a shuffle drawn from ``tie_seed``."""
    y = np.asarray(labels, dtype=np.float64)
    shuffled = np.random.default_rng(tie_seed).permutation(y.size)
    return shuffled[np.argsort(-y[shuffled], kind="stable")]


def listmle_loss(l: LabeledList, tie_seed: int = 0) -> tuple[float, np.ndarray]:
    """Negative Plackett-Luce log-likelihood of the label-ideal ordering.

    With ``s`` the scores in ideal order and ``T_r = logsumexp(s[r:])`` the
    loss is ``sum_r T_r - s_r``. Its gradient w.r.t. ``s_r`` is
    ``-1 + sum_{t <= r} exp(s_r - T_t)``, evaluated in log space.
    """
    order = listmle_order(l.labels, tie_seed)
    s = l.scores[order]
    tail = _reverse_logcumsumexp(s)
    loss = float(np.sum(tail - s))
    g_sorted = np.exp(s + np.logaddexp.accumulate(-tail)) - 1.0
    grad = np.empty_like(s)
    grad[order] = g_sorted
    return max(loss, 0.0), grad


LOSSES = {"listnet": lambda l, tie_seed=0: listnet_loss(l), "listmle": listmle_loss}
