"""Interaction ingestion, k-core filtering and train/validation/test splitting.

Raw input is a TSV of implicit feedback: one interaction per line, first two
whitespace-separated columns are the user token and item token (extra columns
such as timestamps or ratings are ignored). Duplicate (user, item) pairs
collapse to a single interaction. Tokens are remapped to dense integer ids in
first-appearance order.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError


@dataclass(frozen=True)
class InteractionDataset:
    """Deduplicated (user, item) pairs over dense id spaces.

    ``interactions`` is an (E, 2) int array of [user_id, item_id] rows.
    ``user_id_map`` / ``item_id_map`` map original tokens to dense ids; they
    are ``None`` for datasets that were born dense (e.g. read back from split
    files).
    """

    n_users: int
    n_items: int
    interactions: np.ndarray
    user_id_map: dict[str, int] | None = field(default=None, repr=False)
    item_id_map: dict[str, int] | None = field(default=None, repr=False)

    @property
    def n_interactions(self) -> int:
        return len(self.interactions)

    def pair_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(i)) for u, i in self.interactions}


@dataclass(frozen=True)
class SplitDataset:
    """Train/validation/test views sharing one dense id space."""

    train: InteractionDataset
    validation: InteractionDataset
    test: InteractionDataset
    split_seed: int

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items


def load_interactions(path: str | os.PathLike) -> InteractionDataset:
    """Read a raw interaction TSV into a dense, deduplicated dataset.

    Raises ParseError for lines with fewer than two columns (with the line
    number), OSError if the file cannot be read.
    """
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    pairs: list[tuple[int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cols = line.split()
            if len(cols) < 2:
                raise ParseError(f"{path}:{line_no}: expected at least 2 columns, got {len(cols)}")
            u_tok, i_tok = cols[0], cols[1]
            u = user_map.setdefault(u_tok, len(user_map))
            i = item_map.setdefault(i_tok, len(item_map))
            if (u, i) not in seen:
                seen.add((u, i))
                pairs.append((u, i))
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return InteractionDataset(
        n_users=len(user_map),
        n_items=len(item_map),
        interactions=arr,
        user_id_map=user_map,
        item_id_map=item_map,
    )


def kcore_filter(ds: InteractionDataset, k: int = 5) -> InteractionDataset:
    """Restrict to the maximal subgraph where every user and item has degree >= k.

    Iteratively peels low-degree users/items until a fixpoint; surviving ids
    are re-densified preserving the original dense order. May return an empty
    dataset.
    """
    if k < 1:
        raise ConfigError(f"k-core requires k >= 1, got {k}")
    edges = ds.interactions
    while True:
        if len(edges) == 0:
            break
        du = np.bincount(edges[:, 0], minlength=ds.n_users)
        di = np.bincount(edges[:, 1], minlength=ds.n_items)
        keep = (du[edges[:, 0]] >= k) & (di[edges[:, 1]] >= k)
        if keep.all():
            break
        edges = edges[keep]

    # Re-densify surviving ids, keeping the original dense ordering.
    users = np.unique(edges[:, 0]) if len(edges) else np.empty(0, dtype=np.int64)
    items = np.unique(edges[:, 1]) if len(edges) else np.empty(0, dtype=np.int64)
    u_new = np.full(ds.n_users, -1, dtype=np.int64)
    i_new = np.full(ds.n_items, -1, dtype=np.int64)
    u_new[users] = np.arange(len(users))
    i_new[items] = np.arange(len(items))
    remapped = np.stack([u_new[edges[:, 0]], i_new[edges[:, 1]]], axis=1) if len(edges) else edges

    user_map = None
    item_map = None
    if ds.user_id_map is not None:
        user_map = {tok: int(u_new[old]) for tok, old in ds.user_id_map.items() if u_new[old] >= 0}
    if ds.item_id_map is not None:
        item_map = {tok: int(i_new[old]) for tok, old in ds.item_id_map.items() if i_new[old] >= 0}
    return InteractionDataset(
        n_users=len(users),
        n_items=len(items),
        interactions=remapped,
        user_id_map=user_map,
        item_id_map=item_map,
    )


def split_sizes(n: int, ratios: tuple[int, int, int] = (7, 1, 2)) -> tuple[int, int, int]:
    """Deterministic proportional cut: floor for train and validation, remainder to test."""
    if any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must be positive, got {ratios}")
    total = sum(ratios)
    n_train = int(np.floor(n * ratios[0] / total))
    n_valid = int(np.floor(n * ratios[1] / total))
    return n_train, n_valid, n - n_train - n_valid


def split(ds: InteractionDataset, ratios: tuple[int, int, int] = (7, 1, 2), seed: int = 0) -> SplitDataset:
    """Global uniform shuffle under ``seed``, then proportional cut into train/valid/test.

    The three views share the parent id space; users or items may end up with
    no train interactions (evaluation handles them).
    """
    n = ds.n_interactions
    if n < 10:
        raise ConfigError(f"need at least 10 interactions to split, got {n}")
    n_train, n_valid, _ = split_sizes(n, ratios)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = ds.interactions[order]

    def view(rows: np.ndarray) -> InteractionDataset:
        return InteractionDataset(
            n_users=ds.n_users,
            n_items=ds.n_items,
            interactions=np.ascontiguousarray(rows),
            user_id_map=ds.user_id_map,
            item_id_map=ds.item_id_map,
        )

    return SplitDataset(
        train=view(shuffled[:n_train]),
        validation=view(shuffled[n_train:n_train + n_valid]),
        test=view(shuffled[n_train + n_valid:]),
        split_seed=seed,
    )


SPLIT_FILES = {"train": "train.tsv", "validation": "valid.tsv", "test": "test.tsv"}
MANIFEST_FILE = "manifest.json"


def save_split(sd: SplitDataset, out_dir: str | os.PathLike, kcore: int) -> None:
    """Write train/valid/test edge files (dense ids, tab-separated) plus a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    counts = {}
    for name, fname in SPLIT_FILES.items():
        part: InteractionDataset = getattr(sd, name)
        counts[name] = part.n_interactions
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as fh:
            for u, i in part.interactions:
                fh.write(f"{u}\t{i}\n")
    manifest = {
        "n_users": sd.n_users,
        "n_items": sd.n_items,
        "counts": counts,
        "seed": sd.split_seed,
        "kcore": kcore,
    }
    with open(os.path.join(out_dir, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split(data_dir: str | os.PathLike) -> SplitDataset:
    """Read back a directory produced by :func:`save_split`."""
    manifest_path = os.path.join(data_dir, MANIFEST_FILE)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    n_users, n_items = manifest["n_users"], manifest["n_items"]

    def read_edges(fname: str) -> InteractionDataset:
        path = os.path.join(data_dir, fname)
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                cols = line.split()
                if len(cols) != 2:
                    raise ParseError(f"{path}:{line_no}: expected 2 columns")
                rows.append((int(cols[0]), int(cols[1])))
        arr = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
        if len(arr) and (arr[:, 0].max() >= n_users or arr[:, 1].max() >= n_items):
            raise ParseError(f"{path}: edge ids exceed manifest dimensions")
        return InteractionDataset(n_users=n_users, n_items=n_items, interactions=arr)

    return SplitDataset(
        train=read_edges(SPLIT_FILES["train"]),
        validation=read_edges(SPLIT_FILES["validation"]),
        test=read_edges(SPLIT_FILES["test"]),
        split_seed=manifest["seed"],
    )
