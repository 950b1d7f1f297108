import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from dtr.samplers import (
    diagnose, expanding_probability, kl_divergence, layer_probability_vector,
    layer_probability_vectors, layer_softmax, positive_exclusion_bias, proportional_scores,
    sample_path, tree_sample_batch, uniform_layer_sample, uniform_sample_batch, walk_paths,
)
from dtr.scorer import DotScorer, TableScorer
from dtr.tree import NodeId, TreeIndex

from conftest import level_vector_scores


@pytest.fixture
def hand_tree():
    """Complete binary tree of height 3 with hand-set expanding probabilities.

    Global numbering 0..14 in level order: 0 -> (1: 0.3, 2: 0.7), 1 -> (3: 0.4, 4: 0.6),
    3 -> (7: 0.5, 8: 0.5), 4 -> (9: 0.8, 10: 0.2); the remaining groups are uniform.
    """
    t = TreeIndex(range(1, 9), 2)
    p = np.ones(15)
    p[[1, 2]] = [0.3, 0.7]
    p[[3, 4, 5, 6]] = [0.4, 0.6, 0.5, 0.5]
    p[[9, 10]] = [0.8, 0.2]
    p[[7, 8, 11, 12, 13, 14]] = 0.5
    return t, TableScorer(np.log(p))


def test_uniform_two_nodes():
    s = uniform_layer_sample(2, 2, 5, rng=0)
    assert s.negatives.tolist() == [1] * 5 and np.all(s.q == 1.0)


def test_uniform_single_node_raises():
    with pytest.raises(ValueError):
        uniform_layer_sample(1, 1, 3, rng=0)


def test_uniform_chi_square():
    s = uniform_layer_sample(8, 3, 10 ** 4, rng=1)
    assert 3 not in s.negatives
    counts = np.bincount(s.negatives, minlength=9)[[1, 2, 4, 5, 6, 7, 8]]
    assert chisquare(counts).pvalue > 0.01
    assert np.allclose(s.q, 1 / 7)


def test_uniform_deterministic():
    a = uniform_layer_sample(8, 3, 70, rng=9)
    b = uniform_layer_sample(8, 3, 70, rng=9)
    assert np.array_equal(a.negatives, b.negatives)


def test_expanding_probability_examples(hand_tree):
    t, sc = hand_tree
    assert np.allclose(expanding_probability(t, sc, None, NodeId(0, 1)), [0.3, 0.7])
    chain = TreeIndex(range(1, 6), 2)
    node = next(NodeId(2, i) for i in range(1, 5) if len(chain.children_of(NodeId(2, i))) == 1)
    assert expanding_probability(chain, DotScorer(5, chain.n_nodes, random_state=0), [1], node).tolist() == [1.0]
    eq = TableScorer(np.zeros(15))
    assert np.allclose(expanding_probability(t, eq, None, NodeId(1, 2)), [0.5, 0.5])
    with pytest.raises(ValueError):
        expanding_probability(t, eq, None, NodeId(3, 1))


def test_path_probabilities(hand_tree):
    t, sc = hand_tree
    q = layer_probability_vectors(t, sc, None)
    assert q[2][1] == pytest.approx(0.18, abs=1e-15)        # global node 4
    assert q[3][2] == pytest.approx(0.144, abs=1e-15)       # global node 9
    for j in range(4):
        assert q[j].sum() == pytest.approx(1.0, abs=1e-15)


def test_sample_path_cumulative(hand_tree):
    t, sc = hand_tree
    rng = np.random.default_rng(0)
    q = layer_probability_vectors(t, sc, None)
    seen = set()
    for _ in range(200):
        p = sample_path(t, sc, None, rng)
        assert p.indices[0] == 1
        for j in range(1, 4):
            assert t.parent_of(NodeId(j, p.indices[j])).index == p.indices[j - 1]
            assert p.probabilities[j] == pytest.approx(q[j][p.indices[j] - 1], rel=1e-14)
        seen.add(p.indices)
    # the walk through global nodes 0 -> 1 -> 3 -> 8 is level indices (1, 1, 1, 2)
    assert (1, 1, 1, 2) in seen


def test_walk_frequencies_match_dp():
    t = TreeIndex.random(range(1, 11), 3, seed=2)
    sc = TableScorer(np.random.default_rng(3).normal(size=t.n_nodes))
    idx, _ = walk_paths(t, sc, None, 10 ** 4, np.random.default_rng(4))
    q = layer_probability_vectors(t, sc, None)
    for j in range(1, t.height + 1):
        counts = np.bincount(idx[:, j], minlength=t.level_sizes[j])
        keep = q[j] > 0
        assert chisquare(counts[keep], 10 ** 4 * q[j][keep]).pvalue > 0.01


def test_tree_batch_two_leaves():
    t = TreeIndex([1, 2], 2)
    sc = TableScorer(np.zeros(3))
    out = tree_sample_batch(t, sc, None, t.path_indices(1), 1, rng=0)
    assert len(out) == 1 and out[0].negatives.tolist() == [2]
    assert out[0].q.tolist() == [0.5]


def test_tree_batch_invariants_and_q_consistency():
    t = TreeIndex.random(range(1, 20), 2, seed=1)
    sc = DotScorer(19, t.n_nodes, dim=4, random_state=5)
    for v in sc.params.values():
        v *= 20
    hist = np.array([3, 4, 5])
    q = layer_probability_vectors(t, sc, hist)
    path = t.path_indices(7)
    out = tree_sample_batch(t, sc, hist, path, 30, rng=1)
    for s in out:
        assert s.size == 30
        assert np.all(s.negatives != s.pos)
        assert np.all(s.q > 0)
        # the stored q is the exact path probability of the sampled node
        assert np.allclose(s.q, q[s.layer][s.negatives - 1], rtol=1e-12)


def test_tree_batch_deterministic():
    t = TreeIndex.random(range(1, 20), 2, seed=1)
    sc = DotScorer(19, t.n_nodes, random_state=5)
    a = tree_sample_batch(t, sc, [1, 2], t.path_indices(3), 10, rng=7)
    b = tree_sample_batch(t, sc, [1, 2], t.path_indices(3), 10, rng=7)
    for x, y in zip(a, b):
        assert np.array_equal(x.negatives, y.negatives) and np.array_equal(x.q, y.q)


def test_tree_batch_dominant_positive_falls_back():
    # the positive leaf takes almost all mass; the walk budget runs out and the remainder is uniform
    t = TreeIndex(range(1, 5), 2)
    s = np.zeros(t.n_nodes)
    s[t.gid(1, 0)] = 60.0
    s[t.gid(2, 0)] = 60.0
    out = tree_sample_batch(t, TableScorer(s), None, t.path_indices(1), 5, rng=0, max_paths=20)
    assert out[1].size == 5 and np.all(out[1].negatives != 1)
    assert np.allclose(out[1].q, 1 / 3)


def test_per_level_negative_counts():
    t = TreeIndex(range(1, 17), 2)
    m = [0, 1, 3, 7, 15]
    sc = TableScorer(np.zeros(t.n_nodes))
    for out in (tree_sample_batch(t, sc, None, t.path_indices(5), m, rng=0),
                uniform_sample_batch(t, t.path_indices(5), m, rng=0)):
        assert [s.size for s in out] == m[1:]


def test_proportional_construction_frequencies():
    t = TreeIndex.random(range(1, 9), 2, seed=3)
    leaf = np.random.default_rng(1).normal(size=8)
    sc = TableScorer(proportional_scores(t, leaf))
    idx, _ = walk_paths(t, sc, None, 10 ** 4, np.random.default_rng(2))
    for j in range(1, 4):
        p = layer_softmax(t, sc, None, j)
        counts = np.bincount(idx[:, j], minlength=p.size)
        assert chisquare(counts, 10 ** 4 * p).pvalue > 0.01


def test_proportional_hand_example():
    # two leaves per level-1 node: exp o^2 = (1, 2, 3, 4) gives exp o^1 proportional to (3, 7)
    t = TreeIndex([1, 2, 3, 4], 2)
    s = proportional_scores(t, np.log([1.0, 2.0, 3.0, 4.0]))
    e1 = np.exp(s[t.gid(1, np.arange(2))])
    assert e1[1] / e1[0] == pytest.approx(7 / 3)
    q = layer_probability_vector(t, TableScorer(s), None, 2)
    assert q[2] == pytest.approx(0.3, abs=1e-15)
    assert layer_softmax(t, TableScorer(s), None, 2)[2] == pytest.approx(0.3, abs=1e-15)


def test_kl_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence([0.5, 0.5, 0.0], [1.0, 0.0, 0.0]) == math.inf
    with pytest.raises(ValueError):
        kl_divergence([1.0], [0.5, 0.5])
    t = TreeIndex.random(range(1, 30), 3, seed=1)
    sc = TableScorer(proportional_scores(t, np.random.default_rng(0).normal(size=29)))
    for row in diagnose(t, sc, None):
        assert abs(row.kl) < 1e-10 and abs(row.sum_q - 1) < 1e-12


def test_positive_exclusion_bias_measured():
    q = np.array([0.5, 0.25, 0.25])
    assert positive_exclusion_bias(q, 0) == pytest.approx(0.25)
    assert positive_exclusion_bias(np.array([1.0, 0.0]), 0) == math.inf


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 100), B=st.integers(2, 4), seed=st.integers(0, 10 ** 6))
def test_level_sums_are_one(n, B, seed):
    t = TreeIndex.random(range(1, n + 1), B, seed=seed)
    sc = TableScorer(np.random.default_rng(seed).normal(0, 5, size=t.n_nodes))
    for q in layer_probability_vectors(t, sc, None):
        assert abs(q.sum() - 1) <= 1e-12
        assert np.all(q > 0)


def test_node_scores_shortcut_matches_scorer():
    t = TreeIndex.random(range(1, 12), 2, seed=0)
    s = np.random.default_rng(1).normal(size=t.n_nodes)
    a = layer_probability_vectors(t, TableScorer(s), None)
    b = layer_probability_vectors(t, None, None, node_scores=s)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert level_vector_scores(t, [np.zeros(k) for k in t.level_sizes]).size == t.n_nodes
