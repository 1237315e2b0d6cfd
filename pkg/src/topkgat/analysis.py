"""Threshold-rank instrumentation.

For user u and layer l, the threshold rank is the number of items whose
layer-l score meets or exceeds the user's learned threshold for that layer
(scores use the same similarity mode as the forward pass, over all items).
It is the effective cutoff position the layer focuses on. Reports aggregate
it by train degree and across training epochs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .graph import BipartiteGraph
from .model import ModelParams, PropagationTrace, _safe_unit_rows


def _layer_scores(trace: PropagationTrace, params: ModelParams, layer: int,
                  users: np.ndarray) -> np.ndarray:
    """(len(users), n_items) similarity matrix at ``layer`` in forward mode."""
    Z = trace.layers[layer]
    n = params.n_users
    U, V = Z[:n], Z[n:]
    if params.hyper.normalize_similarity:
        U = _safe_unit_rows(U)
        V = _safe_unit_rows(V)
    return U[users] @ V.T


def threshold_rank(trace: PropagationTrace, params: ModelParams, u: int, layer: int) -> int:
    """Count of items whose layer score is >= the user's layer threshold."""
    if not 0 <= layer < params.hyper.n_layers:
        raise IndexError(f"layer {layer} out of range [0, {params.hyper.n_layers})")
    if not 0 <= u < params.n_users:
        raise IndexError(f"user {u} out of range [0, {params.n_users})")
    scores = _layer_scores(trace, params, layer, np.asarray([u]))[0]
    return int(np.sum(scores >= params.thresholds[layer, u]))


def snapshot_ranks(trace: PropagationTrace, params: ModelParams,
                   batch_size: int = 1024) -> np.ndarray:
    """(n_layers, n_users) matrix of threshold ranks, computed in user batches."""
    L = params.hyper.n_layers
    n = params.n_users
    ranks = np.zeros((L, n), dtype=np.int64)
    for layer in range(L):
        thr = params.thresholds[layer]
        for lo in range(0, n, batch_size):
            users = np.arange(lo, min(lo + batch_size, n))
            scores = _layer_scores(trace, params, layer, users)
            ranks[layer, users] = np.sum(scores >= thr[users][:, None], axis=1)
    return ranks


@dataclass(frozen=True)
class RankSnapshot:
    epoch: int
    ranks: np.ndarray  # (n_layers, n_users)

    def layer_means(self) -> list[float]:
        return [float(v) for v in self.ranks.mean(axis=1)]


def _degree_bucket_edges(degrees: np.ndarray) -> list[int]:
    """Power-of-two style edges [5, 8, 16, 32, ...) covering the observed range;
    a [1, 5) bucket is prepended when the split leaves users below degree 5."""
    pos = degrees[degrees > 0]
    edges = [5]
    hi = 8
    while hi <= pos.max():
        edges.append(hi)
        hi *= 2
    edges.append(hi)
    if pos.min() < 5:
        edges = [1] + edges
    return edges


def degree_bucket_table(snapshot: RankSnapshot, g: BipartiteGraph) -> list[dict]:
    """Mean rank per (layer, train-degree bucket); zero-degree users and empty
    buckets are omitted. Layer indices in the output are 1-based."""
    degrees = np.asarray(g.d_u)
    edges = _degree_bucket_edges(degrees)
    rows = []
    for layer in range(snapshot.ranks.shape[0]):
        for lo, hi in zip(edges[:-1], edges[1:]):
            mask = (degrees >= lo) & (degrees < hi)
            if not mask.any():
                continue
            rows.append({
                "layer": layer + 1,
                "bucket_lo": lo,
                "bucket_hi": hi,
                "mean_rank": float(snapshot.ranks[layer, mask].mean()),
                "n_users": int(mask.sum()),
            })
    return rows


def trajectory_table(snapshots: list[RankSnapshot]) -> list[dict]:
    """Per-epoch per-layer mean rank rows (1-based layer indices)."""
    if len(snapshots) < 2:
        raise ValueError("trajectory needs at least 2 snapshots")
    rows = []
    for snap in snapshots:
        for layer, mean in enumerate(snap.layer_means(), start=1):
            rows.append({"epoch": snap.epoch, "layer": layer, "mean_rank": mean})
    return rows


DEGREE_CSV_COLUMNS = ["layer", "bucket_lo", "bucket_hi", "mean_rank", "n_users"]
TRAJECTORY_CSV_COLUMNS = ["epoch", "layer", "mean_rank"]


def write_degree_csv(rows: list[dict], path: str) -> None:
    _write_csv(rows, path, DEGREE_CSV_COLUMNS)


def write_trajectory_csv(rows: list[dict], path: str) -> None:
    _write_csv(rows, path, TRAJECTORY_CSV_COLUMNS)


def _write_csv(rows: list[dict], path: str, columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in columns})
