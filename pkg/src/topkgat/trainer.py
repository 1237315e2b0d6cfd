"""Pairwise-ranking training of embeddings and thresholds.

Each optimization step runs a full-graph propagation on the current
parameters, scores a batch of (user, positive, negative) triples on the
final embeddings, and backpropagates the pairwise log-sigmoid loss by hand
through every layer: the activation path (including the softmax Jacobian per
destination node), the cosine-normalization Jacobian when similarities are
normalized, the degree normalizers, and the per-layer threshold path.
Adam with classic L2 weight decay updates both tables.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import RankSnapshot, snapshot_ranks
from .data import SplitDataset
from .errors import ConfigError, NumericError
from .eval import evaluate_all
from .graph import BipartiteGraph, build_graph, segment_sum
from .model import (Hyperparams, ModelParams, PropagationTrace, bandpass_deriv,
                    edge_weights, final_embeddings, init_params, propagate,
                    _safe_unit_rows)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 0.0
    epochs_max: int = 1000
    patience: int = 50
    batch_size: int = 2048
    seed: int = 0
    negatives_per_positive: int = 1
    snapshot_every: int = 10
    eval_k: int = 20
    deterministic: bool = False
    verbose: bool = False

    def __post_init__(self):
        for name in ("lr", "epochs_max", "batch_size", "negatives_per_positive"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.patience < 0 or self.snapshot_every < 1:
            raise ConfigError("weight_decay/patience/snapshot_every out of range")


class TrainingDiverged(NumericError):
    """Loss became non-finite; carries the last-good result."""

    def __init__(self, message: str, result: "FitResult"):
        super().__init__(message)
        self.result = result


# ---------------------------------------------------------------------------
# sampling and loss


def sample_negatives(g: BipartiteGraph, users: np.ndarray, rng: np.random.Generator,
                     max_rounds: int = 1000) -> np.ndarray:
    """One uniform non-interacted item per user, by rejection resampling.

    Callers must not pass users whose train neighborhood covers the whole
    catalog.
    """
    neg = rng.integers(0, g.n_items, size=len(users))
    bad = g.contains_edges(users, neg)
    rounds = 0
    while bad.any():
        rounds += 1
        if rounds > max_rounds:
            raise NumericError("negative sampling failed to converge")
        neg[bad] = rng.integers(0, g.n_items, size=int(bad.sum()))
        bad[bad] = g.contains_edges(users[bad], neg[bad])
    return neg


def sample_bpr_triples(g: BipartiteGraph, batch_size: int, rng: np.random.Generator,
                       negatives_per_positive: int = 1):
    """(users, positives, negatives) arrays; users drawn edge-proportionally.

    Users who interacted with every item are skipped (with a warning) since
    no negative exists for them.
    """
    if g.n_edges == 0:
        raise ConfigError("cannot sample triples from an empty graph")
    full_users = g.d_u >= g.n_items
    if full_users.all():
        raise ConfigError("every user interacted with every item; no negatives exist")
    users = np.empty(batch_size, dtype=np.int64)
    pos = np.empty(batch_size, dtype=np.int64)
    filled = 0
    warned = False
    while filled < batch_size:
        e = rng.integers(0, g.n_edges, size=batch_size - filled)
        u = g.edge_user[e]
        ok = ~full_users[u]
        if not ok.all() and not warned:
            warnings.warn("skipping users whose neighborhood covers the whole catalog")
            warned = True
        n_ok = int(ok.sum())
        users[filled:filled + n_ok] = u[ok]
        pos[filled:filled + n_ok] = g.user_nbr[e[ok]]
        filled += n_ok
    if negatives_per_positive > 1:
        users = np.repeat(users, negatives_per_positive)
        pos = np.repeat(pos, negatives_per_positive)
    neg = sample_negatives(g, users, rng)
    return users, pos, neg


def bpr_loss(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """Mean -log sigmoid(pos - neg), in the overflow-safe log1p form."""
    scores_pos = np.asarray(scores_pos, dtype=np.float64)
    scores_neg = np.asarray(scores_neg, dtype=np.float64)
    if scores_pos.shape != scores_neg.shape:
        raise ValueError("positive/negative score arrays must have equal length")
    return float(np.mean(np.logaddexp(0.0, scores_neg - scores_pos)))


# ---------------------------------------------------------------------------
# reverse-mode gradients


def _layer_backward(G_out: np.ndarray, Z_in: np.ndarray, sims: np.ndarray,
                    thresholds_l: np.ndarray, g: BipartiteGraph, hyper: Hyperparams):
    """Pull the loss gradient back through one layer.

    G_out is d(loss)/d(layer output); returns (d(loss)/d(layer input),
    d(loss)/d(thresholds_l)).
    """
    n = g.n_users
    GU_out, GV_out = G_out[:n], G_out[n:]
    U, V = Z_in[:n], Z_in[n:]
    tau = hyper.step_size
    keep = 1.0 - hyper.step_size * hyper.reg_weight
    perm = g.item_edge_perm
    c = g.edge_norm
    c_item = c[perm]
    item_of_slot = np.repeat(np.arange(g.n_items), np.diff(g.item_ptr))

    x = sims - thresholds_l[g.edge_user]
    w_user, w_item = edge_weights(x, g, hyper.activation)

    GU = keep * GU_out
    GV = keep * GV_out

    # aggregated-neighbor path: d/dV through the user rule, d/dU through the item rule
    contrib_u = (tau * w_user * c)[:, None] * GU_out[g.edge_user]
    GV = GV + segment_sum(contrib_u[perm], g.item_ptr)
    contrib_i = (tau * w_item * c_item)[:, None] * GV_out[item_of_slot]
    contrib_i_canon = np.empty_like(contrib_i)
    contrib_i_canon[perm] = contrib_i
    GU = GU + segment_sum(contrib_i_canon, g.user_ptr)

    # weight path: scalar gradient per edge on each side
    gw_user = tau * c * np.einsum("ed,ed->e", GU_out[g.edge_user], V[g.user_nbr])
    gw_item = tau * c_item * np.einsum("ed,ed->e", GV_out[item_of_slot], U[g.item_nbr])

    act = hyper.activation
    if act == "constant":
        dx = np.zeros_like(x)
    elif act in ("bandpass", "relu"):
        gw_item_canon = np.empty_like(gw_item)
        gw_item_canon[perm] = gw_item
        dact = bandpass_deriv(x) if act == "bandpass" else (x > 0).astype(np.float64)
        dx = (gw_user + gw_item_canon) * dact
    else:  # softmax: independent Jacobians per user segment and per item segment
        s_u = segment_sum((w_user * gw_user)[:, None], g.user_ptr)[:, 0]
        dx = w_user * (gw_user - s_u[g.edge_user])
        s_i = segment_sum((w_item * gw_item)[:, None], g.item_ptr)[:, 0]
        dx_item = w_item * (gw_item - s_i[item_of_slot])
        dx_item_canon = np.empty_like(dx_item)
        dx_item_canon[perm] = dx_item
        dx = dx + dx_item_canon

    dthr = -segment_sum(dx[:, None], g.user_ptr)[:, 0]

    # similarity path back to the layer-input embeddings
    if hyper.normalize_similarity:
        u_norm = np.linalg.norm(U, axis=1)
        v_norm = np.linalg.norm(V, axis=1)
        Uh = _safe_unit_rows(U)
        Vh = _safe_unit_rows(V)
        inv_u = np.where(u_norm > 0, 1.0 / np.where(u_norm == 0, 1.0, u_norm), 0.0)
        inv_v = np.where(v_norm > 0, 1.0 / np.where(v_norm == 0, 1.0, v_norm), 0.0)
        du_rows = (dx * inv_u[g.edge_user])[:, None] * (
            Vh[g.user_nbr] - sims[:, None] * Uh[g.edge_user])
        dv_rows = (dx * inv_v[g.user_nbr])[:, None] * (
            Uh[g.edge_user] - sims[:, None] * Vh[g.user_nbr])
    else:
        du_rows = dx[:, None] * V[g.user_nbr]
        dv_rows = dx[:, None] * U[g.edge_user]
    GU = GU + segment_sum(du_rows, g.user_ptr)
    GV = GV + segment_sum(dv_rows[perm], g.item_ptr)

    return np.concatenate([GU, GV], axis=0), dthr


def backpropagate_trace(trace: PropagationTrace, g: BipartiteGraph, params: ModelParams,
                        grad_final: np.ndarray):
    """Gradients w.r.t. the initial embeddings and all threshold rows, given the
    gradient w.r.t. the scoring embeddings (final snapshot or snapshot mean)."""
    hyper = params.hyper
    L = hyper.n_layers
    if hyper.scoring == "layer_mean":
        inject = grad_final / (L + 1)
        G = inject.copy()
    else:
        inject = None
        G = grad_final.copy()
    grad_thr = np.zeros_like(params.thresholds)
    for layer in reversed(range(L)):
        G, grad_thr[layer] = _layer_backward(
            G, trace.layers[layer], trace.sims[layer], params.thresholds[layer], g, hyper)
        if inject is not None:
            G = G + inject
    return G, grad_thr


def backward(trace: PropagationTrace, g: BipartiteGraph, params: ModelParams, triples):
    """Loss and exact gradients for a batch of (users, positives, negatives).

    Returns (loss, d/d(initial embeddings), d/d(thresholds)).
    """
    users, pos, neg = (np.asarray(a, dtype=np.int64) for a in triples)
    n = params.n_users
    F = final_embeddings(trace, params.hyper)
    fu, fp, fn = F[users], F[n + pos], F[n + neg]
    delta = np.einsum("bd,bd->b", fu, fp) - np.einsum("bd,bd->b", fu, fn)
    loss = float(np.mean(np.logaddexp(0.0, -delta)))

    # d(loss)/d(delta) = -sigmoid(-delta)/B
    batch = len(users)
    t = np.exp(-np.abs(delta))
    sig_neg = np.where(delta >= 0, t / (1.0 + t), 1.0 / (1.0 + t))
    ddelta = -sig_neg / batch

    GF = np.zeros_like(F)
    np.add.at(GF, users, ddelta[:, None] * (fp - fn))
    np.add.at(GF, n + pos, ddelta[:, None] * fu)
    np.add.at(GF, n + neg, -ddelta[:, None] * fu)

    grad_emb, grad_thr = backpropagate_trace(trace, g, params, GF)
    return loss, grad_emb, grad_thr


# ---------------------------------------------------------------------------
# optimizer and training loop


@dataclass
class TrainState:
    params: ModelParams
    m_emb: np.ndarray
    v_emb: np.ndarray
    m_thr: np.ndarray
    v_thr: np.ndarray
    step: int = 0
    best_metric: float = -np.inf
    best_params: ModelParams | None = None
    best_epoch: int = 0
    epochs_since_improvement: int = 0


def init_train_state(params: ModelParams) -> TrainState:
    return TrainState(
        params=params,
        m_emb=np.zeros_like(params.embeddings),
        v_emb=np.zeros_like(params.embeddings),
        m_thr=np.zeros_like(params.thresholds),
        v_thr=np.zeros_like(params.thresholds),
    )


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(state: TrainState, grad_emb: np.ndarray, grad_thr: np.ndarray,
              lr: float, weight_decay: float = 0.0,
              update_thresholds: bool = True) -> TrainState:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8, bias-corrected).

    weight_decay is the classic L2 term added to both gradients.
    """
    state.step += 1
    t = state.step
    corr1 = 1.0 - ADAM_BETA1 ** t
    corr2 = 1.0 - ADAM_BETA2 ** t

    def update(param, grad, m, v):
        if weight_decay:
            grad = grad + weight_decay * param
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        param -= lr * (m / corr1) / (np.sqrt(v / corr2) + ADAM_EPS)

    update(state.params.embeddings, grad_emb, state.m_emb, state.v_emb)
    if update_thresholds:
        update(state.params.thresholds, grad_thr, state.m_thr, state.v_thr)
    return state


@dataclass
class FitResult:
    params: ModelParams          # best-validation checkpoint
    log: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    diverged: bool = False

    @property
    def best_val_ndcg(self) -> float:
        vals = [rec["val_ndcg20"] for rec in self.log]
        return max(vals) if vals else float("-inf")


def fit(split: SplitDataset, cfg: TrainConfig, hyper: Hyperparams) -> FitResult:
    """Train until patience runs out on validation NDCG or epochs_max.

    Per epoch: one positive per train edge (shuffled), negatives by rejection,
    propagation recomputed per batch on the current parameters. Raises
    TrainingDiverged (carrying the last-good result) if the loss goes
    non-finite.
    """
    if split.train.n_interactions == 0:
        raise ConfigError("train split is empty")
    g = build_graph(split.train)
    params = init_params(split.n_users, split.n_items, hyper, seed=cfg.seed)
    state = init_train_state(params)
    rng = np.random.default_rng(cfg.seed)
    full_users = g.d_u >= g.n_items

    log: list[dict] = []
    snapshots: list[RankSnapshot] = []
    warned_full = False

    def result_so_far(diverged=False) -> FitResult:
        best = state.best_params if state.best_params is not None else state.params.copy()
        return FitResult(params=best, log=log, snapshots=snapshots, diverged=diverged)

    for epoch in range(1, cfg.epochs_max + 1):
        order = rng.permutation(g.n_edges)
        loss_sum = 0.0
        triple_count = 0
        for lo in range(0, g.n_edges, cfg.batch_size):
            edges = order[lo:lo + cfg.batch_size]
            users = g.edge_user[edges]
            ok = ~full_users[users]
            if not ok.all():
                if not warned_full:
                    warnings.warn("skipping users whose neighborhood covers the whole catalog")
                    warned_full = True
                edges = edges[ok]
                users = users[ok]
            if len(edges) == 0:
                continue
            pos = g.user_nbr[edges]
            if cfg.negatives_per_positive > 1:
                users = np.repeat(users, cfg.negatives_per_positive)
                pos = np.repeat(pos, cfg.negatives_per_positive)
            neg = sample_negatives(g, users, rng)

            trace = propagate(state.params, g)
            loss, grad_emb, grad_thr = backward(trace, g, state.params, (users, pos, neg))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss diverged at epoch {epoch}", result_so_far(True))
            adam_step(state, grad_emb, grad_thr, cfg.lr, cfg.weight_decay,
                      update_thresholds=hyper.use_threshold)
            loss_sum += loss * len(users)
            triple_count += len(users)

        epoch_loss = loss_sum / max(triple_count, 1)
        trace = propagate(state.params, g)
        val = evaluate_all(state.params, trace, split, k=cfg.eval_k, target="validation")

        summary = None
        if epoch == 1 or epoch % cfg.snapshot_every == 0 or epoch == cfg.epochs_max:
            snap = RankSnapshot(epoch=epoch, ranks=snapshot_ranks(trace, state.params))
            snapshots.append(snap)
            summary = snap.layer_means()

        record = {
            "epoch": epoch,
            "loss": epoch_loss,
            "val_ndcg20": val.ndcg,
            "val_recall20": val.recall,
            "beta_rank_summary": summary,
        }
        log.append(record)
        if cfg.verbose:
            print(f"epoch {epoch}: loss={epoch_loss:.5f} val_ndcg@{cfg.eval_k}={val.ndcg:.5f}")

        if val.ndcg > state.best_metric:
            state.best_metric = val.ndcg
            state.best_params = state.params.copy()
            state.best_epoch = epoch
            state.epochs_since_improvement = 0
        else:
            state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= cfg.patience:
            break

    if snapshots and snapshots[-1].epoch != log[-1]["epoch"]:
        trace = propagate(state.params, g)
        snap = RankSnapshot(epoch=log[-1]["epoch"], ranks=snapshot_ranks(trace, state.params))
        snapshots.append(snap)
        log[-1]["beta_rank_summary"] = snap.layer_means()

    return result_so_far()


def grid_search(split: SplitDataset, cfg: TrainConfig, hyper: Hyperparams,
                lrs=(0.1, 0.01, 0.001), weight_decays=(0.0, 1e-8, 1e-4),
                layer_counts=(1, 2, 3, 4, 5)):
    """Train every (lr, weight_decay, n_layers) cell; select by validation NDCG.

    Returns (best cell dict with its FitResult, leaderboard sorted by
    descending validation NDCG).
    """
    if not lrs or not weight_decays or not layer_counts:
        raise ConfigError("grid axes must be nonempty")
    leaderboard = []
    best_entry = None
    for lr in lrs:
        for wd in weight_decays:
            for L in layer_counts:
                cell_hyper = replace(hyper, n_layers=L)
                cell_cfg = replace(cfg, lr=lr, weight_decay=wd)
                res = fit(split, cell_cfg, cell_hyper)
                entry = {
                    "lr": lr,
                    "weight_decay": wd,
                    "n_layers": L,
                    "val_ndcg20": res.best_val_ndcg,
                    "epochs": len(res.log),
                }
                leaderboard.append(entry)
                if best_entry is None or entry["val_ndcg20"] > best_entry["val_ndcg20"]:
                    best_entry = dict(entry, result=res)
    leaderboard.sort(key=lambda e: (-e["val_ndcg20"], e["lr"], e["weight_decay"], e["n_layers"]))
    return best_entry, leaderboard
