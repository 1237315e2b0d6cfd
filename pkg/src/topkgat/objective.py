"""The differentiable top-K objective and its gradients.

The objective sums sigmoid(score - per-user threshold) / sqrt(d_u*d_i) over
train edges and subtracts reg_weight * ||Z||^2. Scores here are raw dot
products. ``edge_term_grad`` is the edge-sum part of the gradient alone; one
model layer equals Z + step_size * (4 * edge_term_grad - reg_weight * Z),
the factor 4 coming from the band-pass activation being four times the
sigmoid derivative.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .graph import BipartiteGraph, segment_sum
from .model import sigmoid, sigmoid_prime


def topk_threshold(scores: np.ndarray, k: int) -> float:
    """The k-th largest score: the infimum over the top-k score set.

    Tied values share the threshold (value-based, not index-based).
    """
    scores = np.asarray(scores, dtype=np.float64)
    m = len(scores)
    if not 1 <= k <= m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    return float(np.partition(scores, m - k)[m - k])


def smooth_precision_at_k(scores: np.ndarray, relevant, threshold: float, k: int) -> float:
    """(1/k) * sum over relevant items of sigmoid(score - threshold)."""
    relevant = np.asarray(sorted(relevant), dtype=np.int64)
    if len(relevant) == 0:
        return 0.0
    scores = np.asarray(scores, dtype=np.float64)
    return float(np.sum(sigmoid(scores[relevant] - threshold)) / k)


def _edge_scores(Z: np.ndarray, g: BipartiteGraph) -> np.ndarray:
    U, V = Z[:g.n_users], Z[g.n_users:]
    return np.einsum("ed,ed->e", U[g.edge_user], V[g.user_nbr])


def smooth_objective(Z: np.ndarray, thresholds: np.ndarray, g: BipartiteGraph,
                     reg_weight: float) -> float:
    """Edge-summed smooth precision minus reg_weight * ||Z||^2 (raw dot scores)."""
    x = _edge_scores(Z, g) - thresholds[g.edge_user]
    val = float(np.sum(sigmoid(x) * g.edge_norm) - reg_weight * np.sum(Z * Z))
    if not np.isfinite(val):
        raise NumericError("non-finite objective value")
    return val


def edge_term_grad(Z: np.ndarray, thresholds: np.ndarray, g: BipartiteGraph) -> np.ndarray:
    """Gradient of the edge sum w.r.t. Z (regularizer excluded).

    Per user: sum over neighbors of sigma'(s - thr) / sqrt(d_u*d_i) * z_i,
    and symmetrically per item.
    """
    n = g.n_users
    U, V = Z[:n], Z[n:]
    x = _edge_scores(Z, g) - thresholds[g.edge_user]
    coeff = sigmoid_prime(x) * g.edge_norm
    gu = segment_sum(coeff[:, None] * V[g.user_nbr], g.user_ptr)
    coeff_item = coeff[g.item_edge_perm]
    gi = segment_sum(coeff_item[:, None] * U[g.item_nbr], g.item_ptr)
    return np.concatenate([gu, gi], axis=0)


def objective_grad(Z: np.ndarray, thresholds: np.ndarray, g: BipartiteGraph,
                   reg_weight: float) -> np.ndarray:
    """Exact gradient of :func:`smooth_objective` w.r.t. Z.

    The ||Z||^2 penalty differentiates to 2 * reg_weight * Z.
    """
    return edge_term_grad(Z, thresholds, g) - 2.0 * reg_weight * Z


def objective_grad_thresholds(Z: np.ndarray, thresholds: np.ndarray,
                              g: BipartiteGraph) -> np.ndarray:
    """Gradient w.r.t. the per-user thresholds: -sum_i sigma'(s - thr)/sqrt(d_u*d_i)."""
    x = _edge_scores(Z, g) - thresholds[g.edge_user]
    coeff = sigmoid_prime(x) * g.edge_norm
    return -segment_sum(coeff[:, None], g.user_ptr)[:, 0]


def numeric_grad(Z: np.ndarray, thresholds: np.ndarray, g: BipartiteGraph,
                 reg_weight: float, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of :func:`smooth_objective` w.r.t. Z.

    Double precision; intended as an independent oracle on small instances.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    Z = np.asarray(Z, dtype=np.float64)
    out = np.zeros_like(Z)
    for idx in np.ndindex(Z.shape):
        Zp = Z.copy()
        Zp[idx] += h
        Zm = Z.copy()
        Zm[idx] -= h
        out[idx] = (smooth_objective(Zp, thresholds, g, reg_weight)
                    - smooth_objective(Zm, thresholds, g, reg_weight)) / (2.0 * h)
    return out
