"""Bag-level ranking metrics and 0/1 error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    bag_id: int
    score: float
    label: int

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise MetricError(f"non-finite score for bag {self.bag_id}")
        if self.label not in (0, 1):
            raise MetricError(f"label must be 0/1, got {self.label}")


def records_from_arrays(bag_ids: Sequence[int], scores: Sequence[float], labels: Sequence[int]) -> list[EvalRecord]:
    return [EvalRecord(int(i), float(s), int(y)) for i, s, y in zip(bag_ids, scores, labels)]


def _columns(records: Iterable[EvalRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    recs = list(records)
    ids = np.array([r.bag_id for r in recs], dtype=np.int64)
    scores = np.array([r.score for r in recs], dtype=np.float64)
    labels = np.array([r.label for r in recs], dtype=np.int64)
    return ids, scores, labels


def average_precision(records: Iterable[EvalRecord]) -> float:
    """Mean of precision@rank over the ranks of the positives.

    Ranking is by score descending; equal scores are ordered by ascending bag id.
    """
    ids, scores, labels = _columns(records)
    if not labels.any():
        raise MetricError("AP undefined: no positive records")
    order = np.lexsort((ids, -scores))
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def roc_auc(records: Iterable[EvalRecord]) -> float:
    """Probability a random positive outscores a random negative, ties counting 1/2."""
    _, scores, labels = _columns(records)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need both classes")
    ranks = rankdata(scores)  # average ranks resolve ties as 1/2 wins
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def zero_one_error(records: Iterable[EvalRecord], threshold: float = 0.5) -> float:
    _, scores, labels = _columns(records)
    if labels.size == 0:
        raise MetricError("zero_one_error needs at least one record")
    return float(np.mean((scores >= threshold).astype(np.int64) != labels))
