"""Exact top-K retrieval with seen-item exclusion, and ranking metrics.

Users are evaluated only if they have at least one interaction in both the
train split and the target split. Validation-time evaluation excludes train
items from the candidate set; test-time evaluation additionally excludes
validation items.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SplitDataset
from .errors import EvaluationError
from .model import ModelParams, PropagationTrace, score_users


def recommend_topk(scores: np.ndarray, exclude, k: int) -> np.ndarray:
    """Ids of the k highest-scored items outside ``exclude``.

    Descending by score, ties broken by ascending item id; truncated if fewer
    than k candidates remain.
    """
    scores = np.asarray(scores, dtype=np.float64)
    masked = scores.copy()
    exclude = np.asarray(list(exclude) if not isinstance(exclude, np.ndarray) else exclude,
                         dtype=np.int64)
    if len(exclude):
        masked[exclude] = -np.inf
    available = len(masked) - len(np.unique(exclude)) if len(exclude) else len(masked)
    k = min(k, available)
    # stable sort on negated scores: equal scores keep ascending-id order
    order = np.argsort(-masked, kind="stable")
    return order[:k]


def _as_id_set(relevant) -> set:
    if isinstance(relevant, np.ndarray):
        return set(relevant.tolist())
    return set(relevant)


def precision_recall_at_k(recs, relevant, k: int) -> tuple[float, float]:
    """Hit fraction of the slate (over k) and of the relevant set."""
    relevant = _as_id_set(relevant)
    if not relevant:
        raise EvaluationError("precision/recall undefined for an empty relevant set")
    if isinstance(recs, np.ndarray):
        recs = recs.tolist()
    hits = sum(1 for i in recs if i in relevant)
    return hits / k, hits / len(relevant)


def ndcg_at_k(recs, relevant, k: int) -> float:
    """Binary-relevance NDCG with log2(rank+1) discount, ideal sum truncated
    at min(|relevant|, k)."""
    relevant = _as_id_set(relevant)
    if not relevant:
        raise EvaluationError("ndcg undefined for an empty relevant set")
    if isinstance(recs, np.ndarray):
        recs = recs.tolist()
    dcg = 0.0
    for pos, item in enumerate(recs[:k], start=1):
        if item in relevant:
            dcg += 1.0 / np.log2(pos + 1)
    ideal = sum(1.0 / np.log2(pos + 1) for pos in range(1, min(len(relevant), k) + 1))
    return dcg / ideal


@dataclass
class EvalReport:
    k: int
    evaluated_user_count: int
    precision: float
    recall: float
    ndcg: float
    per_user: dict = field(repr=False, default_factory=dict)

    def to_dict(self, include_per_user: bool = False) -> dict:
        out = {
            "K": self.k,
            "evaluated_users": self.evaluated_user_count,
            "precision": self.precision,
            "recall": self.recall,
            "ndcg": self.ndcg,
        }
        if include_per_user:
            out["per_user"] = {
                str(u): dict(vals) for u, vals in sorted(self.per_user.items())
            }
        return out


def _group_by_user(interactions: np.ndarray, n_users: int):
    """CSR-style (items, ptr) with each user's items sorted ascending."""
    if len(interactions) == 0:
        return np.empty(0, dtype=np.int64), np.zeros(n_users + 1, dtype=np.int64)
    order = np.lexsort((interactions[:, 1], interactions[:, 0]))
    e = interactions[order]
    ptr = np.searchsorted(e[:, 0], np.arange(n_users + 1))
    return np.ascontiguousarray(e[:, 1]), ptr.astype(np.int64)


def evaluate_all(params: ModelParams, trace: PropagationTrace, split: SplitDataset,
                 k: int = 20, target: str = "test", batch_size: int = 512) -> EvalReport:
    """Per-user Precision/Recall/NDCG at k over eligible users, plus unweighted means."""
    if target not in ("test", "validation"):
        raise ValueError(f"target must be 'test' or 'validation', got {target!r}")
    n = split.n_users
    tr_items, tr_ptr = _group_by_user(split.train.interactions, n)
    target_ds = split.test if target == "test" else split.validation
    ta_items, ta_ptr = _group_by_user(target_ds.interactions, n)
    if target == "test":
        va_items, va_ptr = _group_by_user(split.validation.interactions, n)
    else:
        va_items, va_ptr = None, None

    train_deg = np.diff(tr_ptr)
    target_deg = np.diff(ta_ptr)
    eligible = np.flatnonzero((train_deg > 0) & (target_deg > 0))
    if len(eligible) == 0:
        raise EvaluationError(f"no users with both train and {target} interactions")

    per_user: dict[int, dict] = {}
    for lo in range(0, len(eligible), batch_size):
        batch = eligible[lo:lo + batch_size]
        scores = score_users(params, trace, batch)
        for row, u in enumerate(batch):
            u = int(u)
            exclude = tr_items[tr_ptr[u]:tr_ptr[u + 1]]
            if va_items is not None:
                exclude = np.concatenate([exclude, va_items[va_ptr[u]:va_ptr[u + 1]]])
            relevant = ta_items[ta_ptr[u]:ta_ptr[u + 1]]
            recs = recommend_topk(scores[row], exclude, k)
            p, r = precision_recall_at_k(recs, relevant, k)
            nd = ndcg_at_k(recs, relevant, k)
            per_user[u] = {"precision": p, "recall": r, "ndcg": nd}

    count = len(per_user)
    return EvalReport(
        k=k,
        evaluated_user_count=count,
        precision=sum(v["precision"] for v in per_user.values()) / count,
        recall=sum(v["recall"] for v in per_user.values()) / count,
        ndcg=sum(v["ndcg"] for v in per_user.values()) / count,
        per_user=per_user,
    )
