import numpy as np
import pytest

from topkgat.data import InteractionDataset, SplitDataset, split
from topkgat.graph import build_graph


def make_dataset(edges, n_users=None, n_items=None):
    """InteractionDataset from a list of (u, i) pairs in dense-id space."""
    arr = np.asarray(sorted(set(edges)), dtype=np.int64).reshape(-1, 2)
    n = n_users if n_users is not None else (int(arr[:, 0].max()) + 1 if len(arr) else 0)
    m = n_items if n_items is not None else (int(arr[:, 1].max()) + 1 if len(arr) else 0)
    return InteractionDataset(n_users=n, n_items=m, interactions=arr)


def random_dataset(n, m, rng, p=0.4):
    """Random bipartite dataset where every user and item has at least one edge."""
    edges = {(u, i) for u in range(n) for i in range(m) if rng.random() < p}
    for u in range(n):
        if not any(e[0] == u for e in edges):
            edges.add((u, int(rng.integers(m))))
    for i in range(m):
        if not any(e[1] == i for e in edges):
            edges.add((int(rng.integers(n)), i))
    return make_dataset(edges, n_users=n, n_items=m)


def random_graph(n, m, rng, p=0.4):
    return build_graph(random_dataset(n, m, rng, p))


def planted_block_dataset(n_users=40, n_items=60, density=0.3, seed=1234):
    """Two disjoint user/item communities with dense within-block interactions."""
    rng = np.random.default_rng(seed)
    half_u, half_i = n_users // 2, n_items // 2
    edges = []
    for u in range(n_users):
        block = 0 if u < half_u else 1
        lo = 0 if block == 0 else half_i
        for i in range(lo, lo + half_i):
            if rng.random() < density:
                edges.append((u, i))
    return make_dataset(edges, n_users=n_users, n_items=n_items)


@pytest.fixture(scope="session")
def planted_split() -> SplitDataset:
    return split(planted_block_dataset(), seed=99)
