"""Immutable bipartite interaction graph in CSR form, both directions.

Edges come from the training split only. The canonical edge order is the
user-CSR order (sorted by (user, item)); per-edge arrays such as attention
weights are always stored in that order, and ``item_edge_perm`` maps each
item-CSR slot back to its canonical edge index.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .data import InteractionDataset


@dataclass(frozen=True)
class BipartiteGraph:
    n_users: int
    n_items: int
    # user -> items, CSR; user_nbr sorted ascending within each row
    user_ptr: np.ndarray
    user_nbr: np.ndarray
    # item -> users, CSR; item_nbr sorted ascending within each row
    item_ptr: np.ndarray
    item_nbr: np.ndarray
    d_u: np.ndarray
    d_i: np.ndarray
    # per-edge 1/sqrt(d_u * d_i) in canonical (user-CSR) order
    edge_norm: np.ndarray
    # user id of each canonical edge (the item id is user_nbr)
    edge_user: np.ndarray
    # canonical edge index of each item-CSR slot
    item_edge_perm: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.user_nbr)

    @cached_property
    def edge_keys(self) -> np.ndarray:
        """Sorted u * n_items + i keys of all edges (for membership queries)."""
        return self.edge_user * self.n_items + self.user_nbr

    def contains_edges(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorized membership test for (user, item) pairs."""
        keys = self.edge_keys
        if len(keys) == 0:
            return np.zeros(len(users), dtype=bool)
        cand = users.astype(np.int64) * self.n_items + items.astype(np.int64)
        idx = np.searchsorted(keys, cand)
        idx_clip = np.minimum(idx, len(keys) - 1)
        return keys[idx_clip] == cand

    def user_neighbors(self, u: int):
        """Items of user u with matching edge normalizers (read-only views)."""
        if not 0 <= u < self.n_users:
            raise IndexError(f"user id {u} out of range [0, {self.n_users})")
        lo, hi = self.user_ptr[u], self.user_ptr[u + 1]
        return self.user_nbr[lo:hi], self.edge_norm[lo:hi]

    def item_neighbors(self, i: int):
        """Users of item i with matching edge normalizers (read-only views)."""
        if not 0 <= i < self.n_items:
            raise IndexError(f"item id {i} out of range [0, {self.n_items})")
        lo, hi = self.item_ptr[i], self.item_ptr[i + 1]
        return self.item_nbr[lo:hi], self.edge_norm[self.item_edge_perm[lo:hi]]


def build_graph(train: InteractionDataset) -> BipartiteGraph:
    """Build CSR adjacency in both directions with degrees and edge normalizers."""
    n, m = train.n_users, train.n_items
    edges = train.interactions
    if len(edges):
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges = edges[order]
    eu = edges[:, 0] if len(edges) else np.empty(0, dtype=np.int64)
    ei = edges[:, 1] if len(edges) else np.empty(0, dtype=np.int64)

    d_u = np.bincount(eu, minlength=n).astype(np.int64)
    d_i = np.bincount(ei, minlength=m).astype(np.int64)
    user_ptr = np.concatenate([[0], np.cumsum(d_u)]).astype(np.int64)
    item_ptr = np.concatenate([[0], np.cumsum(d_i)]).astype(np.int64)

    item_order = np.lexsort((eu, ei))
    item_nbr = eu[item_order]
    item_edge_perm = item_order.astype(np.int64)

    norm = np.empty(len(edges), dtype=np.float64)
    if len(edges):
        norm[:] = 1.0 / np.sqrt(d_u[eu].astype(np.float64) * d_i[ei].astype(np.float64))

    g = BipartiteGraph(
        n_users=n,
        n_items=m,
        user_ptr=user_ptr,
        user_nbr=ei,
        item_ptr=item_ptr,
        item_nbr=item_nbr,
        d_u=d_u,
        d_i=d_i,
        edge_norm=norm,
        edge_user=eu,
        item_edge_perm=item_edge_perm,
    )
    for arr in (g.user_ptr, g.user_nbr, g.item_ptr, g.item_nbr, g.d_u, g.d_i,
                g.edge_norm, g.edge_user, g.item_edge_perm):
        arr.setflags(write=False)
    return g


def segment_sum(values: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """Sum contiguous row segments of ``values`` delimited by CSR ``ptr``.

    Exact left-to-right accumulation per segment (no cumsum cancellation);
    empty segments yield zero rows.
    """
    n_seg = len(ptr) - 1
    out_shape = (n_seg,) + values.shape[1:]
    out = np.zeros(out_shape, dtype=values.dtype)
    if len(values) == 0 or n_seg == 0:
        return out
    starts = ptr[:-1]
    nonempty = ptr[1:] > starts
    if not nonempty.any():
        return out
    # reduceat over only the nonempty starts: empty segments contribute no rows,
    # so each reduction span covers exactly one nonempty segment.
    sums = np.add.reduceat(values, starts[nonempty], axis=0)
    out[nonempty] = sums
    return out
