"""Ranking and accuracy metrics for recommender evaluation.

Per-user ranking metrics return ``None`` (the skip sentinel) for users with
no relevant items; aggregates average over the remaining users only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

METRIC_NAMES = ("map", "map_at_k", "ndcg", "precision_at_k", "recall_at_k",
                "explained_variance", "mae")
# Metrics where a smaller value is better.
LOWER_IS_BETTER = frozenset({"mae"})
DISPLAY_NAMES = {
    "map": "MAP",
    "map_at_k": "MAP@K",
    "ndcg": "NDCG",
    "precision_at_k": "Precision@K",
    "recall_at_k": "Recall@K",
    "explained_variance": "Explained Var",
    "mae": "MAE",
}


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RankedList:
    user_id: int
    items: tuple
    scores: tuple = ()

    @classmethod
    def from_scores(cls, user_id, items, scores) -> "RankedList":
        """Sort by descending score, ties by ascending item id."""
        items = np.asarray(items)
        scores = np.asarray(scores, dtype=np.float64)
        order = np.lexsort((items, -scores))
        return cls(user_id, tuple(items[order].tolist()), tuple(scores[order].tolist()))


@dataclass(frozen=True)
class RelevanceSet:
    user_id: int
    relevant_items: frozenset
    graded_relevance: dict = field(default_factory=dict)

    @classmethod
    def binary(cls, user_id, items) -> "RelevanceSet":
        items = frozenset(items)
        return cls(user_id, items, {i: 1.0 for i in items})

    def grade(self, item) -> float:
        return self.graded_relevance.get(item, 1.0 if item in self.relevant_items else 0.0)


def _hits(ranked: RankedList, truth: RelevanceSet, cutoff=None) -> np.ndarray:
    items = ranked.items if cutoff is None else ranked.items[:cutoff]
    rel = truth.relevant_items
    return np.fromiter((it in rel for it in items), dtype=bool, count=len(items))


def average_precision(ranked: RankedList, truth: RelevanceSet, cutoff: int | None = None):
    """Mean of P@k over the ranks k holding a relevant item.

    The sum is normalised by ``min(|relevant|, cutoff)``, which reduces to
    ``|relevant|`` for an uncut list. Returns None if nothing is relevant.
    """
    if not ranked.items:
        raise MetricError("ranked list is empty")
    if not truth.relevant_items:
        return None
    if cutoff is not None and cutoff < 1:
        raise MetricError("cutoff must be >= 1")
    hits = _hits(ranked, truth, cutoff)
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, len(ranks) + 1) / ranks
    denom = len(truth.relevant_items)
    if cutoff is not None:
        denom = min(denom, cutoff)
    return float(precisions.sum() / denom)


def mean_average_precision(all_ranked: Sequence[RankedList], all_truth: Sequence[RelevanceSet],
                           cutoff: int | None = None) -> float:
    if len(all_ranked) != len(all_truth):
        raise MetricError("ranked lists and truth sets are not aligned")
    aps = [average_precision(r, t, cutoff) for r, t in zip(all_ranked, all_truth)]
    aps = [a for a in aps if a is not None]
    if not aps:
        raise MetricError("no users with relevant items")
    return float(np.mean(aps))


def ndcg(ranked: RankedList, truth: RelevanceSet, cutoff: int):
    """Linear-gain NDCG with 1/log2(rank + 1) discount, truncated at cutoff."""
    if cutoff < 1:
        raise MetricError("cutoff must be >= 1")
    if not truth.relevant_items:
        return None
    gains = np.array([truth.grade(it) for it in ranked.items[:cutoff]], dtype=np.float64)
    discounts = 1.0 / np.log2(np.arange(2, len(gains) + 2))
    dcg = float(gains @ discounts)
    ideal = np.sort(np.array([truth.grade(it) for it in truth.relevant_items]))[::-1][:cutoff]
    idcg = float(ideal @ (1.0 / np.log2(np.arange(2, len(ideal) + 2))))
    return dcg / idcg


def precision_at_k(ranked: RankedList, truth: RelevanceSet, k: int):
    """Hits in the top k divided by k. None for users without relevant items,
    so they contribute nothing to the aggregate."""
    if k < 1:
        raise MetricError("k must be >= 1")
    if not truth.relevant_items:
        return None
    return float(_hits(ranked, truth, k).sum() / k)


def recall_at_k(ranked: RankedList, truth: RelevanceSet, k: int):
    if k < 1:
        raise MetricError("k must be >= 1")
    if not truth.relevant_items:
        return None
    return float(_hits(ranked, truth, k).sum() / len(truth.relevant_items))


def explained_variance(predicted, actual) -> float:
    """1 - Var(actual - predicted) / Var(actual), population variances."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise MetricError("length mismatch")
    if len(actual) < 2:
        raise MetricError("need at least two values")
    var = np.var(actual)
    if var == 0:
        raise MetricError("actual values have zero variance")
    return float(1.0 - np.var(actual - predicted) / var)


def mae(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise MetricError("length mismatch")
    if len(actual) == 0:
        raise MetricError("need at least one value")
    return float(np.mean(np.abs(predicted - actual)))


@dataclass(frozen=True)
class MetricReport:
    map: float
    map_at_k: float
    ndcg: float
    precision_at_k: float
    recall_at_k: float
    explained_variance: float
    mae: float
    k: int
    n_users: int = 0

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "MetricReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_table(self) -> str:
        rows = [(DISPLAY_NAMES[n], f"{v:.6f}") for n, v in self.values().items()]
        w0 = max(len("Metric"), *(len(r[0]) for r in rows))
        lines = [f"{'Metric':<{w0}} | Value", "-" * (w0 + 12)]
        lines += [f"{a:<{w0}} | {b}" for a, b in rows]
        return "\n".join(lines) + "\n"


class RecommenderModel(Protocol):
    """Anything that scores (user, item) pairs.

    ``score_matrix`` returns a len(users) x len(items) array; ``predict``
    returns one value per aligned (user, item) pair, on the scale the model
    natively outputs (used for MAE / explained variance).
    """

    trained: bool

    def score_matrix(self, user_ids, item_ids) -> np.ndarray: ...

    def predict(self, user_ids, item_ids) -> np.ndarray: ...


def _sum_ordered(values):
    # Fixed left-to-right summation keeps aggregates independent of numpy's
    # pairwise-summation blocking.
    total = 0.0
    for v in values:
        total += v
    return total


def evaluate(model, split, k: int = 10, relevance_threshold: float | None = None,
             exclude_train: bool = True, chunk: int = 256) -> MetricReport:
    """Full-ranking evaluation of ``model`` on ``split.test``.

    For every test user with relevant items, all catalogue items (train and
    test) except the user's positive train items are ranked. Relevant items
    are the user's test interactions with rating > 0 (and >= the threshold if
    one is given); their rating is the NDCG gain. ``exclude_train=False``
    keeps the user's train items in the candidate list. MAE and explained variance
    compare ``model.predict`` with the raw ratings of every test interaction.
    """
    if not getattr(model, "trained", False):
        raise MetricError("model is not trained")
    if k < 1:
        raise MetricError("k must be >= 1")
    train, test = split.train, split.test
    if len(test) == 0:
        raise MetricError("empty test set")
    catalogue = np.union1d(train.item_ids, test.item_ids)
    col_of = {int(it): j for j, it in enumerate(catalogue)}

    rel_mask = test.ratings > 0
    if relevance_threshold is not None:
        rel_mask &= test.ratings >= relevance_threshold
    rel_users = test.users[rel_mask]
    rel_items = test.items[rel_mask]
    rel_grades = test.ratings[rel_mask]
    eval_users = np.unique(rel_users)
    if len(eval_users) == 0:
        raise MetricError("no test users with relevant items")

    train_pos = train.positives()
    train_seen = train_pos.user_index

    ap_full, ap_k, nd, prec, rec = [], [], [], [], []
    rel_index = _group_by(rel_users)
    discounts = 1.0 / np.log2(np.arange(2, len(catalogue) + 2))
    for start in range(0, len(eval_users), chunk):
        block = eval_users[start:start + chunk]
        scores = np.asarray(model.score_matrix(block, catalogue), dtype=np.float64)
        for row, u in enumerate(block):
            u = int(u)
            cand = np.ones(len(catalogue), dtype=bool)
            if exclude_train and u in train_seen:
                cand[[col_of[int(i)] for i in train_pos.items[train_seen[u]]]] = False
            cand_idx = np.flatnonzero(cand)
            s = scores[row, cand_idx]
            order = cand_idx[np.lexsort((catalogue[cand_idx], -s))]
            pos = rel_index[u]
            grade = np.zeros(len(catalogue))
            grade[[col_of[int(i)] for i in rel_items[pos]]] = rel_grades[pos]
            g = grade[order]
            hits = g > 0
            n_rel = int(np.count_nonzero(grade))
            cum = np.cumsum(hits)
            ranks = np.flatnonzero(hits) + 1
            prec_at_hits = cum[hits] / ranks
            ap_full.append(_sum_ordered(prec_at_hits.tolist()) / n_rel)
            kk = min(k, len(order))
            ap_k.append(_sum_ordered(prec_at_hits[ranks <= k].tolist()) / min(n_rel, k))
            dcg = _sum_ordered((g[:k] * discounts[:kk]).tolist())
            ideal = np.sort(grade[grade > 0])[::-1][:k]
            idcg = _sum_ordered((ideal * discounts[:len(ideal)]).tolist())
            nd.append(dcg / idcg)
            top_hits = int(cum[kk - 1])
            prec.append(top_hits / k)
            rec.append(top_hits / n_rel)

    preds = np.asarray(model.predict(test.users, test.items), dtype=np.float64)
    n = len(ap_full)
    return MetricReport(
        map=float(_sum_ordered(ap_full) / n),
        map_at_k=float(_sum_ordered(ap_k) / n),
        ndcg=float(_sum_ordered(nd) / n),
        precision_at_k=float(_sum_ordered(prec) / n),
        recall_at_k=float(_sum_ordered(rec) / n),
        explained_variance=explained_variance(preds, test.ratings) if len(test) >= 2
        and np.var(test.ratings) > 0 else float("nan"),
        mae=mae(preds, test.ratings),
        k=k,
        n_users=n,
    )


def _group_by(ids: np.ndarray) -> dict[int, np.ndarray]:
    order = np.argsort(ids, kind="stable")
    uniq, starts = np.unique(ids[order], return_index=True)
    bounds = np.append(starts, len(ids))
    return {int(u): order[bounds[j]:bounds[j + 1]] for j, u in enumerate(uniq)}


def percent_change(after: float, before: float) -> float | None:
    if before == 0 or not math.isfinite(before):
        return None
    return (after - before) / before * 100.0
