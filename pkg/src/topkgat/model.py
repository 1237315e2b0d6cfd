"""Model parameters and forward computation.

A single layer aggregates neighbor embeddings along train edges with
edge weights w = activation(similarity - per-user threshold), scaled by
1/sqrt(d_u*d_i), plus a (1 - step_size*reg_weight) residual on the node's own
embedding. With the default band-pass activation this layer is one ascent
step on a smoothed precision-at-K objective (see the objective module); the
"constant" and "relu" activations recover plain normalized-adjacency
aggregation and monotone attention as special cases, "softmax" is the
vanilla-GAT ablation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .graph import BipartiteGraph, segment_sum

ACTIVATIONS = ("bandpass", "constant", "relu", "softmax")
SCORING_MODES = ("final_layer", "layer_mean")


# ---------------------------------------------------------------------------
# smooth scalar functions (stable for |x| far beyond the overflow range)

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def sigmoid_prime(x):
    """sigma'(x) = sigma(x) * sigma(-x), computed overflow-free."""
    x = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(x))
    out = t / (1.0 + t) ** 2
    return out if out.ndim else float(out)


def bandpass(x):
    """Band-pass edge activation: 4 * sigma'(x), a bell curve with peak 1 at 0.

    Symmetric by construction (computed from exp(-|x|)), range (0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(x))
    out = 4.0 * t / (1.0 + t) ** 2
    return out if out.ndim else float(out)


def bandpass_deriv(x):
    """d/dx of :func:`bandpass`: -bandpass(x) * tanh(x/2)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.exp(-np.abs(x))
    out = -np.sign(x) * (4.0 * t / (1.0 + t) ** 2) * ((1.0 - t) / (1.0 + t))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hyperparams:
    """Architecture knobs. ``step_size``/``reg_weight`` are the layer-rule
    coefficients (both default 1, which cancels the residual term)."""

    dim: int = 64
    n_layers: int = 2
    step_size: float = 1.0
    reg_weight: float = 1.0
    activation: str = "bandpass"
    use_threshold: bool = True
    normalize_similarity: bool = True
    scoring: str = "final_layer"

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if self.reg_weight < 0:
            raise ConfigError(f"reg_weight must be >= 0, got {self.reg_weight}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.scoring not in SCORING_MODES:
            raise ConfigError(f"unknown scoring mode {self.scoring!r}")


@dataclass
class ModelParams:
    """Embedding table (users first, then items) plus per-layer per-user thresholds."""

    embeddings: np.ndarray  # (n_users + n_items, dim)
    thresholds: np.ndarray  # (n_layers, n_users)
    n_users: int
    n_items: int
    hyper: Hyperparams

    def copy(self) -> "ModelParams":
        return ModelParams(self.embeddings.copy(), self.thresholds.copy(),
                           self.n_users, self.n_items, self.hyper)


@dataclass
class PropagationTrace:
    """Layer snapshots plus the per-edge similarities and attention weights
    of every layer (canonical edge order; for softmax, user-side weights)."""

    layers: list  # n_layers + 1 arrays of shape (n_users + n_items, dim)
    sims: list    # n_layers arrays of shape (n_edges,)
    attn: list    # n_layers arrays of shape (n_edges,)


def init_params(n_users: int, n_items: int, hyper: Hyperparams, seed: int = 0) -> ModelParams:
    """Gaussian(0, 0.1) embeddings, zero thresholds."""
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, 0.1, size=(n_users + n_items, hyper.dim))
    thr = np.zeros((hyper.n_layers, n_users))
    return ModelParams(emb, thr, n_users, n_items, hyper)


def edge_similarity(zu: np.ndarray, zi: np.ndarray, normalize: bool = True) -> float:
    """Similarity of one user/item embedding pair.

    Cosine when ``normalize`` (a zero vector yields similarity 0.0), raw dot
    product otherwise.
    """
    zu = np.asarray(zu, dtype=np.float64)
    zi = np.asarray(zi, dtype=np.float64)
    if not normalize:
        return float(zu @ zi)
    nu, ni = np.linalg.norm(zu), np.linalg.norm(zi)
    if nu == 0.0 or ni == 0.0:
        return 0.0
    return float((zu @ zi) / (nu * ni))


def _safe_unit_rows(A: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(A, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    return A / safe[:, None]


def _edge_sims(Z: np.ndarray, g: BipartiteGraph, normalize: bool) -> np.ndarray:
    U, V = Z[:g.n_users], Z[g.n_users:]
    if normalize:
        U = _safe_unit_rows(U)
        V = _safe_unit_rows(V)
    return np.einsum("ed,ed->e", U[g.edge_user], V[g.user_nbr])


def _segment_softmax(x: np.ndarray, ptr: np.ndarray, seg_of_edge: np.ndarray) -> np.ndarray:
    n_seg = len(ptr) - 1
    starts = ptr[:-1]
    nonempty = ptr[1:] > starts
    segmax = np.zeros(n_seg)
    if x.size:
        segmax[nonempty] = np.maximum.reduceat(x, starts[nonempty])
    ex = np.exp(x - segmax[seg_of_edge])
    denom = segment_sum(ex[:, None], ptr)[:, 0]
    return ex / denom[seg_of_edge]


def edge_weights(x: np.ndarray, g: BipartiteGraph, activation: str):
    """Per-edge aggregation weights from shifted similarities ``x``.

    Returns (user-side weights, item-side weights in item-CSR order). The two
    sides differ only for softmax, which normalizes per destination node.
    """
    if activation == "bandpass":
        w = bandpass(x)
    elif activation == "constant":
        w = np.ones_like(x)
    elif activation == "relu":
        w = np.maximum(x, 0.0)
    elif activation == "softmax":
        w_user = _segment_softmax(x, g.user_ptr, g.edge_user)
        x_item = x[g.item_edge_perm]
        seg_item = np.repeat(np.arange(g.n_items), np.diff(g.item_ptr))
        w_item = _segment_softmax(x_item, g.item_ptr, seg_item)
        return w_user, w_item
    else:
        raise ConfigError(f"unknown activation {activation!r}")
    return w, w[g.item_edge_perm]


def forward_layer(Z: np.ndarray, thresholds_l: np.ndarray, g: BipartiteGraph,
                  hyper: Hyperparams):
    """One aggregation layer.

    Returns (next embeddings, user-side attention weights, similarities), the
    latter two in canonical edge order. Aggregation always sums the raw
    neighbor embeddings; ``normalize_similarity`` only affects the similarity
    fed to the activation.
    """
    if not np.isfinite(Z).all():
        raise NumericError("non-finite embeddings")
    n = g.n_users
    U, V = Z[:n], Z[n:]
    sims = _edge_sims(Z, g, hyper.normalize_similarity)
    x = sims - thresholds_l[g.edge_user]
    w_user, w_item = edge_weights(x, g, hyper.activation)

    keep = 1.0 - hyper.step_size * hyper.reg_weight
    tau = hyper.step_size
    vals_u = (w_user * g.edge_norm)[:, None] * V[g.user_nbr]
    new_U = keep * U + tau * segment_sum(vals_u, g.user_ptr)
    norm_item = g.edge_norm[g.item_edge_perm]
    vals_i = (w_item * norm_item)[:, None] * U[g.item_nbr]
    new_V = keep * V + tau * segment_sum(vals_i, g.item_ptr)
    return np.concatenate([new_U, new_V], axis=0), w_user, sims


def propagate(params: ModelParams, g: BipartiteGraph) -> PropagationTrace:
    """Apply all layers, recording snapshots, similarities and attention."""
    Z = params.embeddings
    layers = [Z]
    sims_all, attn_all = [], []
    for layer in range(params.hyper.n_layers):
        try:
            Z, attn, sims = forward_layer(Z, params.thresholds[layer], g, params.hyper)
        except NumericError as exc:
            raise NumericError(f"layer {layer}: {exc}") from exc
        layers.append(Z)
        sims_all.append(sims)
        attn_all.append(attn)
    if not np.isfinite(Z).all():
        raise NumericError(f"layer {params.hyper.n_layers - 1}: non-finite output")
    return PropagationTrace(layers=layers, sims=sims_all, attn=attn_all)


def final_embeddings(trace: PropagationTrace, hyper: Hyperparams) -> np.ndarray:
    """Embeddings used for scoring: last snapshot or the mean of all snapshots."""
    if hyper.scoring == "final_layer":
        return trace.layers[-1]
    return np.mean(np.stack(trace.layers, axis=0), axis=0)


def score_all(params: ModelParams, trace: PropagationTrace, u: int) -> np.ndarray:
    """Raw dot-product scores of user u against every item."""
    F = final_embeddings(trace, params.hyper)
    return F[u] @ F[params.n_users:].T


def score_users(params: ModelParams, trace: PropagationTrace, users: np.ndarray) -> np.ndarray:
    """Score a batch of users against all items; rows follow ``users``."""
    F = final_embeddings(trace, params.hyper)
    return F[users] @ F[params.n_users:].T


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, dims, flags, then row-major float64
# little-endian embeddings and thresholds.

_MAGIC = b"TOPKGAT\x00"
_VERSION = 1
_HEADER = "<IIIIIBBBBdd"  # version, n, m, dim, L, act, thr, norm, scoring, step, reg


def save_checkpoint(params: ModelParams, path: str) -> None:
    h = params.hyper
    header = _MAGIC + struct.pack(
        _HEADER,
        _VERSION, params.n_users, params.n_items, h.dim, h.n_layers,
        ACTIVATIONS.index(h.activation), int(h.use_threshold),
        int(h.normalize_similarity), SCORING_MODES.index(h.scoring),
        h.step_size, h.reg_weight,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(params.embeddings, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(params.thresholds, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ConfigError(f"{path}: not a model checkpoint (bad magic)")
        header = fh.read(struct.calcsize(_HEADER))
        (version, n, m, dim, n_layers, act, thr, norm, scoring,
         step, reg) = struct.unpack(_HEADER, header)
        if version != _VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        hyper = Hyperparams(
            dim=dim, n_layers=n_layers, step_size=step, reg_weight=reg,
            activation=ACTIVATIONS[act], use_threshold=bool(thr),
            normalize_similarity=bool(norm), scoring=SCORING_MODES[scoring],
        )
        emb = np.frombuffer(fh.read((n + m) * dim * 8), dtype="<f8").reshape(n + m, dim)
        thresholds = np.frombuffer(fh.read(n_layers * n * 8), dtype="<f8").reshape(n_layers, n)
    return ModelParams(emb.astype(np.float64), thresholds.astype(np.float64), n, m, hyper)
