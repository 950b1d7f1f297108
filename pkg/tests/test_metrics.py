import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtr.beam import retrieve_topk
from dtr.data import EvalUser
from dtr.losses import layer_expectations
from dtr.metrics import (
    bayes_topk, evaluate, evaluate_users, exhaustive_topk, full_softmax_gradient, precision_recall_f,
)
from dtr.scorer import DotScorer, TableScorer
from dtr.tree import TreeIndex

from conftest import level_vector_scores


def test_prf_examples():
    retrieved = list(range(1, 21))
    truth = list(range(16, 56))
    p, r, f = precision_recall_f(retrieved, truth, 20)
    assert (p, r) == (0.25, 0.125) and f == pytest.approx(1 / 6)
    assert precision_recall_f([1, 2], [1, 2], 2) == (1.0, 1.0, 1.0)
    assert precision_recall_f([1, 2], [3], 2) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        precision_recall_f([1], [], 1)


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(1, 11))), st.integers(1, 10))
def test_prf_order_invariant_within_k(perm, k):
    truth = {2, 3, 5, 7}
    base = list(range(1, 11))
    shuffled = sorted(base[:k], key=perm.index) + base[k:]
    assert precision_recall_f(base, truth, k) == precision_recall_f(shuffled, truth, k)


def test_evaluate_skips_empty_truth():
    rep = evaluate({1: [1, 2], 2: [3, 4]}, {1: {1}, 2: set()}, ks=(2,))
    assert rep.n_users == 1 and rep.n_skipped == 1 and rep.recall[2] == 1.0
    assert rep.to_tsv().splitlines()[0] == "K\tprecision\trecall\tf_measure\tn_users"


def test_bayes_topk(prop1_eta):
    assert bayes_topk(prop1_eta, 3).tolist() == [1, 5, 4]
    assert bayes_topk(prop1_eta, 1).tolist() == [1]
    assert bayes_topk(np.r_[0, np.full(6, 1 / 6)], 3).tolist() == [1, 2, 3]


def test_full_softmax_gradient():
    g = full_softmax_gradient(np.zeros(4), 2, 1.0)
    assert g.tolist() == [0.25, -0.75, 0.25, 0.25]
    assert np.all(full_softmax_gradient(np.zeros(4), 2, 0.0) == 0)
    g = full_softmax_gradient(np.random.default_rng(0).normal(size=7), 3)
    assert abs(g.sum()) < 1e-12
    with pytest.raises(ValueError):
        full_softmax_gradient([0.0, np.inf], 1)


def test_exhaustive_all_items_in_order():
    t = TreeIndex.random(range(1, 11), 2, seed=0)
    sc = DotScorer(10, t.n_nodes, random_state=0)
    items, s = exhaustive_topk(t, sc, [1, 2], 10)
    assert sorted(items.tolist()) == list(range(1, 11)) and np.all(np.diff(s) <= 0)


def test_exhaustive_equals_full_beam():
    t = TreeIndex.random(range(1, 33), 3, seed=1)
    sc = DotScorer(32, t.n_nodes, random_state=1)
    a, _ = exhaustive_topk(t, sc, [3], 32)
    b, _ = retrieve_topk(t, sc, [3], 32)
    assert a.tolist() == b.tolist()


def test_beam_overlap_diagnostic():
    t = TreeIndex.random(range(1, 65), 2, seed=2)
    sc = DotScorer(64, t.n_nodes, random_state=2)
    k = 5
    a, _ = exhaustive_topk(t, sc, [1, 2, 3], k)
    b, _ = retrieve_topk(t, sc, [1, 2, 3], 4 * k, n_results=k)
    overlap = len(set(a.tolist()) & set(b.tolist())) / k
    assert 0.0 <= overlap <= 1.0


def test_max_heap_exhaustive_equals_bayes():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = int(rng.integers(4, 40))
        t = TreeIndex.random(range(1, n + 1), int(rng.integers(2, 4)), seed=int(rng.integers(1e6)))
        eta = np.r_[0, rng.dirichlet(np.ones(n))]
        sc = TableScorer(level_vector_scores(t, layer_expectations(t, eta, True)))
        for k in (1, 3, n):
            assert exhaustive_topk(t, sc, None, k)[0].tolist() == bayes_topk(eta, k).tolist()


def test_evaluate_users_stores_lists():
    t = TreeIndex.random(range(1, 9), 2, seed=0)
    sc = DotScorer(8, t.n_nodes, random_state=0)
    users = [EvalUser(1, np.array([1, 2]), frozenset({3, 4})), EvalUser(2, np.array([5]), frozenset({1}))]
    got = {}
    rep = evaluate_users(t, sc, users, 8, ks=(8,), retrieved=got)
    assert rep.recall[8] == 1.0 and set(got) == {1, 2}
    assert evaluate_users(t, sc, users, 8, ks=(8,), exhaustive=True).recall[8] == 1.0
