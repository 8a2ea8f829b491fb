"""Negative-bag sampling strategies.

Every strategy takes a frozen model snapshot and the negative pool and returns
the ``k`` bag ids to train on this round. Scored strategies rank bags by a
per-bag score oriented so that smaller is preferred, breaking ties by
ascending bag id; BADGE selects by k-means++ seeding over gradient embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from weaklab.bagcore import BagDataset
from weaklab.model import (
    DEFAULT_MODE,
    AggregationMode,
    BagOutput,
    ModelParams,
    last_layer_gradient,
    predict_bags,
    softmax,
)

EPS = 1e-12


class SamplingError(ValueError):
    pass


class StrategyKind(str, Enum):
    RANDOM = "random"
    MARGIN = "margin"
    ENTROPY = "entropy"
    LEAST_CONFIDENCE = "least_confidence"
    GRAD_EMBEDDING = "grad_embedding"
    BADGE = "badge"
    KL_PROB = "kl_prob"
    KL_EMBEDDING = "kl_embedding"
    SVM_MARGIN = "svm_margin"


ALL_STRATEGIES = tuple(StrategyKind)


@dataclass(frozen=True)
class ScoredBag:
    bag_id: int
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise SamplingError(f"non-finite score for bag {self.bag_id}")


@dataclass(frozen=True)
class SvmModel:
    w: np.ndarray
    b: float
    reg_lambda: float

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.w + self.b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision_function(x) >= 0).astype(np.int64)


@dataclass(frozen=True)
class Snapshot:
    """Read-only copy of the parameters used to score the pool."""

    params: ModelParams
    mode: AggregationMode = DEFAULT_MODE

    @classmethod
    def of(cls, params: ModelParams, mode: AggregationMode | str = DEFAULT_MODE) -> Snapshot:
        return cls(params.copy(), AggregationMode(mode))


# --- per-bag scores (vectorized over a leading axis) --------------------------

def score_margin(bag_probs: np.ndarray) -> np.ndarray | float:
    p = np.asarray(bag_probs, dtype=np.float64)
    out = np.abs(p[..., 1] - p[..., 0])
    return float(out) if out.ndim == 0 else out


def score_entropy(bag_probs: np.ndarray) -> np.ndarray | float:
    p = np.asarray(bag_probs, dtype=np.float64)
    out = -(p * np.log(p + EPS)).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def score_least_confidence(bag_probs: np.ndarray) -> np.ndarray | float:
    out = np.asarray(bag_probs, dtype=np.float64).max(axis=-1)
    return float(out) if out.ndim == 0 else out


def score_grad_norm(g: np.ndarray) -> np.ndarray | float:
    out = np.linalg.norm(np.asarray(g, dtype=np.float64), axis=-1)
    return float(out) if out.ndim == 0 else out


def score_kl(dist: np.ndarray, reference: np.ndarray) -> np.ndarray | float:
    """KL(dist || reference) with both sides smoothed by 1e-12."""
    d = np.asarray(dist, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    out = (d * np.log((d + EPS) / (r + EPS))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def score_svm_margin(embedding: np.ndarray, model: SvmModel) -> np.ndarray | float:
    """Distance from the SVM hyperplane, |w.e + b| / ||w||."""
    norm = float(np.linalg.norm(model.w))
    if norm == 0.0:
        raise SamplingError("degenerate SVM: zero weight vector")
    out = np.abs(model.decision_function(embedding)) / norm
    return float(out) if np.ndim(out) == 0 else out


def kl_projection(embedding_dim: int, seed: int = 0) -> np.ndarray:
    """Fixed (2, E) random projection used to turn embeddings into 2-way distributions."""
    return np.random.default_rng(seed).standard_normal((2, embedding_dim)) / np.sqrt(embedding_dim)


def embedding_distribution(embeddings: np.ndarray, projection: np.ndarray) -> np.ndarray:
    """softmax over the embedding, projected to two pseudo-classes, then softmax again."""
    return softmax(softmax(np.asarray(embeddings, dtype=np.float64)) @ projection.T)


# --- selection ----------------------------------------------------------------

def select_k(scored: Sequence[ScoredBag], k: int) -> list[int]:
    """The k bag ids with smallest (score, bag_id)."""
    if not 0 <= k <= len(scored):
        raise SamplingError(f"k={k} outside [0, {len(scored)}]")
    ids = np.array([s.bag_id for s in scored], dtype=np.int64)
    scores = np.array([s.score for s in scored], dtype=np.float64)
    order = np.lexsort((ids, scores))
    return [int(i) for i in ids[order[:k]]]


def kmeanspp_select(embeddings: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    """k-means++ seeding with a deterministic first centre at the largest-norm row.

    Later centres are drawn with probability proportional to the squared
    distance to the nearest chosen centre. When every remaining distance is
    zero (duplicates), the next centre is uniform over unchosen rows.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise SamplingError(f"k={k} outside [1, {n}]")
    norms = np.einsum("ij,ij->i", x, x)
    chosen = [int(np.argmax(norms))]
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    d2 = np.einsum("ij,ij->i", x - x[chosen[0]], x - x[chosen[0]])
    while len(chosen) < k:
        w = np.where(taken, 0.0, d2)
        total = w.sum()
        if total <= 0.0:
            nxt = int(rng.choice(np.flatnonzero(~taken)))
        else:
            cum = np.cumsum(w)
            nxt = int(np.searchsorted(cum, rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
            if w[nxt] == 0.0:
                nxt = int(np.flatnonzero(w > 0)[-1])
        chosen.append(nxt)
        taken[nxt] = True
        diff = x - x[nxt]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
    return chosen


def fit_linear_svm(
    embeddings: np.ndarray,
    labels: np.ndarray,
    reg_lambda: float = 1e-4,
    epochs: int = 10,
    rng: np.random.Generator | None = None,
    batch_size: int | None = 1,
) -> SvmModel:
    """Pegasos: minimize lambda/2 ||w||^2 + mean hinge loss by projected SGD, step 1/(lambda t).

    The bias is learned as the weight of a constant feature. ``batch_size=None``
    uses the full data set per step (deterministic subgradient descent).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y01 = np.asarray(labels)
    if len(np.unique(y01)) < 2:
        raise SamplingError("SVM needs both classes present")
    if reg_lambda <= 0:
        raise SamplingError("reg_lambda must be > 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    y = np.where(y01 == 1, 1.0, -1.0)
    xa = np.hstack([x, np.ones((len(x), 1))])
    n = len(xa)
    bs = n if batch_size is None else max(1, min(batch_size, n))
    w = np.zeros(xa.shape[1])
    radius = 1.0 / np.sqrt(reg_lambda)
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            t += 1
            eta = 1.0 / (reg_lambda * t)
            viol = y[idx] * (xa[idx] @ w) < 1.0
            grad = reg_lambda * w - (y[idx][viol, None] * xa[idx][viol]).sum(axis=0) / len(idx)
            w = w - eta * grad
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
    return SvmModel(w[:-1].copy(), float(w[-1]), reg_lambda)


# --- dispatch -------------------------------------------------------------------

@dataclass
class SamplerSettings:
    svm_lambda: float = 1e-4
    svm_epochs: int = 10
    kl_projection_seed: int = 0
    chunk: int = 256


def pool_scores(
    strategy: StrategyKind,
    pool: np.ndarray,
    snapshot: Snapshot,
    dataset: BagDataset,
    rng: np.random.Generator,
    settings: SamplerSettings,
) -> np.ndarray:
    """Oriented scores (smaller preferred) for every id in ``pool``."""
    def predict(ids: np.ndarray) -> BagOutput:
        return predict_bags(snapshot.params, dataset.bag_features(ids), snapshot.mode, settings.chunk)

    out = predict(pool)
    if strategy is StrategyKind.MARGIN:
        return score_margin(out.bag_probs)
    if strategy is StrategyKind.ENTROPY:
        return -score_entropy(out.bag_probs)
    if strategy is StrategyKind.LEAST_CONFIDENCE:
        return score_least_confidence(out.bag_probs)
    if strategy is StrategyKind.GRAD_EMBEDDING:
        return -score_grad_norm(last_layer_gradient(out))
    positives = np.array(sorted(dataset.positive_ids), dtype=np.int64)
    if len(positives) == 0:
        raise SamplingError(f"{strategy.value} needs positive bags")
    pos_out = predict(positives)
    if strategy is StrategyKind.KL_PROB:
        return score_kl(out.bag_probs, pos_out.bag_probs.mean(axis=0))
    if strategy is StrategyKind.KL_EMBEDDING:
        proj = kl_projection(out.embedding.shape[1], settings.kl_projection_seed)
        ref = embedding_distribution(pos_out.embedding, proj).mean(axis=0)
        return score_kl(embedding_distribution(out.embedding, proj), ref)
    if strategy is StrategyKind.SVM_MARGIN:
        negatives = np.array(sorted(dataset.negative_ids), dtype=np.int64)
        neg_emb = out.embedding if np.array_equal(negatives, pool) else predict(negatives).embedding
        x = np.vstack([pos_out.embedding, neg_emb])
        y = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
        svm = fit_linear_svm(x, y, settings.svm_lambda, settings.svm_epochs, rng)
        return score_svm_margin(out.embedding, svm)
    raise SamplingError(f"{strategy.value} is not a scored strategy")


def sample_negatives(
    pool_ids: Sequence[int],
    strategy: StrategyKind | str,
    k: int,
    snapshot: Snapshot,
    dataset: BagDataset,
    rng: np.random.Generator,
    settings: SamplerSettings | None = None,
) -> list[int]:
    """Select S-: exactly ``k`` distinct ids from ``pool_ids``."""
    strategy = StrategyKind(strategy)
    settings = settings or SamplerSettings()
    pool = np.array(sorted(set(int(i) for i in pool_ids)), dtype=np.int64)
    if len(pool) == 0:
        raise SamplingError("empty negative pool")
    if not 1 <= k <= len(pool):
        raise SamplingError(f"k={k} outside [1, {len(pool)}] for a pool of {len(pool)}")
    if strategy is StrategyKind.RANDOM:
        return [int(i) for i in rng.choice(pool, size=k, replace=False)]
    if strategy is StrategyKind.BADGE:
        out = predict_bags(snapshot.params, dataset.bag_features(pool), snapshot.mode, settings.chunk)
        return [int(pool[i]) for i in kmeanspp_select(last_layer_gradient(out), k, rng)]
    scores = pool_scores(strategy, pool, snapshot, dataset, rng, settings)
    return select_k([ScoredBag(int(i), float(s)) for i, s in zip(pool, scores)], k)

