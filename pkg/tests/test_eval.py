import numpy as np
import pytest

from topkgat.data import SplitDataset
from topkgat.errors import EvaluationError
from topkgat.eval import (EvalReport, evaluate_all, ndcg_at_k,
                          precision_recall_at_k, recommend_topk)
from topkgat.graph import build_graph
from topkgat.model import Hyperparams, ModelParams, PropagationTrace, propagate

from conftest import make_dataset


# ---------------------------------------------------------------------------
# recommend_topk


def test_recommend_excludes_seen():
    recs = recommend_topk(np.array([5.0, 4.0, 3.0, 2.0]), {0}, 2)
    assert recs.tolist() == [1, 2]


def test_recommend_tie_break_by_id():
    recs = recommend_topk(np.zeros(6), set(), 3)
    assert recs.tolist() == [0, 1, 2]


def test_recommend_truncates_when_few_candidates():
    recs = recommend_topk(np.array([3.0, 2.0, 1.0]), {0, 1}, 5)
    assert recs.tolist() == [2]


def brute_force_topk(scores, exclude, k):
    cands = [(i, s) for i, s in enumerate(scores) if i not in exclude]
    cands.sort(key=lambda t: (-t[1], t[0]))
    return [i for i, _ in cands[:k]]


def test_recommend_matches_sort_filter_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = 200
        scores = np.round(rng.normal(size=m), 2)  # rounded to force score ties
        exclude = set(rng.choice(m, size=rng.integers(0, 30), replace=False).tolist())
        k = int(rng.integers(1, 40))
        assert recommend_topk(scores, exclude, k).tolist() == brute_force_topk(scores, exclude, k)


def test_recommend_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    for _ in range(20):
        scores = rng.normal(size=100)
        k = int(rng.integers(1, 30))
        exclude = set(rng.choice(100, size=10, replace=False).tolist())
        base = recommend_topk(scores, exclude, k).tolist()
        assert recommend_topk(3.0 * scores + 7.0, exclude, k).tolist() == base
        assert recommend_topk(np.exp(scores / 2), exclude, k).tolist() == base


# ---------------------------------------------------------------------------
# precision / recall / ndcg


def test_precision_recall_basic():
    p, r = precision_recall_at_k(["a", "b", "c"], {"b", "c", "d"}, 3)
    assert p == pytest.approx(2 / 3) and r == pytest.approx(2 / 3)


def test_precision_recall_disjoint():
    assert precision_recall_at_k([1, 2], {3, 4}, 2) == (0.0, 0.0)


def test_precision_recall_superset():
    recs = list(range(20))
    p, r = precision_recall_at_k(recs, {3, 9}, 20)
    assert p == pytest.approx(0.1) and r == 1.0


def test_precision_recall_hit_count_crosscheck():
    rng = np.random.default_rng(2)
    for _ in range(30):
        m = 40
        k = int(rng.integers(1, 15))
        recs = rng.choice(m, size=k, replace=False).tolist()
        rel = set(rng.choice(m, size=rng.integers(1, 12), replace=False).tolist())
        p, r = precision_recall_at_k(recs, rel, k)
        hits = len(set(recs) & rel)
        assert p * k == pytest.approx(hits)
        assert r * len(rel) == pytest.approx(hits)


def test_empty_relevant_set_is_contract_violation():
    with pytest.raises(EvaluationError):
        precision_recall_at_k([1], set(), 1)
    with pytest.raises(EvaluationError):
        ndcg_at_k([1], set(), 1)


def test_ndcg_perfect_ranking():
    assert ndcg_at_k([4, 2, 9], {2, 4, 9, 11}, 3) == pytest.approx(1.0)


def test_ndcg_no_hits():
    assert ndcg_at_k([1, 2, 3], {7}, 3) == 0.0


def test_ndcg_hand_value():
    # hit, miss, hit with |T|=2: dcg = 1 + 0.5, idcg = 1 + 1/log2(3)
    val = ndcg_at_k([10, 11, 12], {10, 12}, 3)
    expected = (1.0 + 1.0 / np.log2(4)) / (1.0 + 1.0 / np.log2(3))
    assert val == pytest.approx(expected)
    assert val == pytest.approx(0.91972, abs=1e-5)


def test_ndcg_bounds_and_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        m = 50
        k = int(rng.integers(1, 25))
        recs = rng.choice(m, size=min(k, m), replace=False).tolist()
        rel = set(rng.choice(m, size=rng.integers(1, 20), replace=False).tolist())
        val = ndcg_at_k(recs, rel, k)
        dcg = sum(1.0 / np.log2(j + 2) for j, i in enumerate(recs[:k]) if i in rel)
        idcg = sum(1.0 / np.log2(j + 2) for j in range(min(len(rel), k)))
        assert val == pytest.approx(dcg / idcg, abs=1e-12)
        assert 0.0 <= val <= 1.0


# ---------------------------------------------------------------------------
# evaluate_all


def identity_trace(F):
    return PropagationTrace(layers=[F], sims=[], attn=[])


def toy_split(train_edges, valid_edges, test_edges, n, m):
    return SplitDataset(
        train=make_dataset(train_edges, n_users=n, n_items=m),
        validation=make_dataset(valid_edges, n_users=n, n_items=m),
        test=make_dataset(test_edges, n_users=n, n_items=m),
        split_seed=0,
    )


def params_with_final(F, n, m, scoring="final_layer"):
    h = Hyperparams(dim=F.shape[1], n_layers=1, scoring=scoring)
    return ModelParams(F.copy(), np.zeros((1, n)), n, m, h)


def test_evaluate_single_user_perfect():
    # user 0 trained on item 0; test items {1, 2} get the top scores
    n, m = 1, 4
    F = np.array([[1.0, 0.0],   # user 0
                  [0.1, 0.0],   # item 0 (train, excluded)
                  [0.9, 0.0],   # item 1 (test)
                  [0.8, 0.0],   # item 2 (test)
                  [-1.0, 0.0]])  # item 3
    split = toy_split([(0, 0)], [], [(0, 1), (0, 2)], n, m)
    params = params_with_final(F, n, m)
    report = evaluate_all(params, identity_trace(F), split, k=2)
    assert report.evaluated_user_count == 1
    assert report.recall == 1.0 and report.ndcg == 1.0 and report.precision == 1.0


def test_evaluate_aggregates_are_user_means():
    n, m = 3, 5
    rng = np.random.default_rng(4)
    F = rng.normal(size=(n + m, 3))
    split = toy_split(
        [(0, 0), (1, 1), (2, 2)], [], [(0, 1), (0, 2), (1, 0), (2, 4)], n, m)
    params = params_with_final(F, n, m)
    report = evaluate_all(params, identity_trace(F), split, k=2)
    per = report.per_user
    assert report.precision == pytest.approx(np.mean([per[u]["precision"] for u in per]))
    assert report.recall == pytest.approx(np.mean([per[u]["recall"] for u in per]))
    assert report.ndcg == pytest.approx(np.mean([per[u]["ndcg"] for u in per]))


def test_evaluate_skips_users_without_train_or_target():
    n, m = 3, 4
    rng = np.random.default_rng(5)
    F = rng.normal(size=(n + m, 2))
    # user 1 has no train edge; user 2 has no test edge
    split = toy_split([(0, 0), (2, 1)], [], [(0, 1), (1, 2)], n, m)
    params = params_with_final(F, n, m)
    report = evaluate_all(params, identity_trace(F), split, k=2)
    assert set(report.per_user) == {0}


def test_evaluate_errors_with_no_eligible_users():
    n, m = 2, 3
    F = np.zeros((n + m, 2))
    split = toy_split([(0, 0)], [], [(1, 1)], n, m)  # test user has no train edge
    with pytest.raises(EvaluationError):
        evaluate_all(params_with_final(F, n, m), identity_trace(F), split, k=2)


def test_test_time_candidates_exclude_validation_items():
    n, m = 1, 3
    # item scores: train item0=0.2, validation item1=5.0, test item2=0.1
    F = np.array([[1.0], [0.2], [5.0], [0.1]])
    split = toy_split([(0, 0)], [(0, 1)], [(0, 2)], n, m)
    params = params_with_final(F, n, m)
    # top-scoring validation item must not occupy the single test slot
    test_report = evaluate_all(params, identity_trace(F), split, k=1, target="test")
    assert test_report.per_user[0]["recall"] == 1.0
    val_report = evaluate_all(params, identity_trace(F), split, k=1, target="validation")
    assert val_report.per_user[0]["recall"] == 1.0


def test_validation_time_excludes_only_train():
    n, m = 1, 3
    # scores: item0=0.2 (train), item1=0.9 (validation), item2=0.5 (test)
    F = np.array([[1.0], [0.2], [0.9], [0.5]])
    split = toy_split([(0, 0)], [(0, 1)], [(0, 2)], n, m)
    params = params_with_final(F, n, m)
    val_report = evaluate_all(params, identity_trace(F), split, k=1, target="validation")
    assert val_report.per_user[0]["recall"] == 1.0  # item 1 beats item 2
    test_report = evaluate_all(params, identity_trace(F), split, k=1, target="test")
    assert test_report.per_user[0]["recall"] == 1.0  # item 1 excluded, item 2 wins


def test_evaluate_order_independent_and_batch_invariant(planted_split):
    g = build_graph(planted_split.train)
    h = Hyperparams(dim=8, n_layers=2)
    from topkgat.model import init_params
    params = init_params(planted_split.n_users, planted_split.n_items, h, seed=0)
    trace = propagate(params, g)
    a = evaluate_all(params, trace, planted_split, k=10, batch_size=512)
    b = evaluate_all(params, trace, planted_split, k=10, batch_size=3)
    assert a.per_user == b.per_user
    assert (a.precision, a.recall, a.ndcg) == (b.precision, b.recall, b.ndcg)


def test_report_json_shape():
    report = EvalReport(k=20, evaluated_user_count=2, precision=0.1, recall=0.2,
                        ndcg=0.3, per_user={1: {"precision": 0.1, "recall": 0.2, "ndcg": 0.3}})
    d = report.to_dict()
    assert d == {"K": 20, "evaluated_users": 2, "precision": 0.1, "recall": 0.2, "ndcg": 0.3}
    with_users = report.to_dict(include_per_user=True)
    assert with_users["per_user"]["1"]["ndcg"] == 0.3
