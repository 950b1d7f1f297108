import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtr.losses import full_softmax_grad, sampled_softmax_grad
from dtr.scorer import (
    DEFAULT_WINDOWS, SGD, Adam, CheckpointError, DINScorer, DotScorer, TableScorer,
    apply_gradients, attention_weight, load_params, parse_tensors, save_params,
)

from din_reference import din_reference
from gradcheck import relative_error, scaled_din

SMALL = dict(dim=4, window_sizes=(3, 2, 1), attention_hidden=5, hidden=(8, 4))


def small_din(seed=0, n_items=10, n_nodes=7):
    return DINScorer(n_items, n_nodes, random_state=seed, **SMALL)


def test_attention_zero_inputs():
    s = small_din()
    assert attention_weight(np.zeros(4), np.zeros(4), s.params) == 0.0


def test_attention_hand_computed():
    params = {"att_w1": np.ones((1, 3)), "att_w2": np.ones((1, 1)),
              "att_a1": np.array([0.25]), "att_a2": np.array([0.25])}
    assert attention_weight(np.array([1.0]), np.array([1.0]), params) == 3.0


def test_attention_dimension_mismatch():
    s = small_din()
    with pytest.raises(ValueError):
        attention_weight(np.zeros(3), np.zeros(4), s.params)


def test_attention_matches_batched_path():
    s = scaled_din(small_din(1), rng=2)
    h = np.array([0, 3, 7, 1, 9, 2])
    w, _ = s.attention_weights(h, [2, 5])
    for r, node in enumerate([2, 5]):
        for c, item in enumerate(h[h > 0]):
            assert w[r, c] == pytest.approx(
                attention_weight(s.params["item_emb"][item], s.params["node_emb"][node], s.params),
                rel=1e-12, abs=1e-14)


def test_window_aggregate_padding_and_singletons():
    s = scaled_din(small_din(2), rng=3)
    h = np.array([0, 0, 0, 4, 5, 6])        # first window fully padded
    Z, (w, att, _) = s.window_aggregate(h, [1])
    assert Z.shape == (1, 3, 4)
    assert np.all(Z[0, 0] == 0)
    A = s.params["item_emb"]
    # the last window holds one item: z = w * a
    assert np.allclose(Z[0, 2], w[0, 2] * A[6])


def test_default_windows_give_ten_vectors():
    s = DINScorer(20, 5, dim=3, random_state=0)
    assert s.history_length == 69 and len(DEFAULT_WINDOWS) == 10
    Z, _ = s.window_aggregate(np.arange(69) % 21, [0])
    assert Z.shape == (1, 10, 3)


def test_din_zero_history_and_node():
    s = small_din()
    s.params["node_emb"][3] = 0.0
    assert s.score(np.zeros(6, dtype=int), [3])[0] == 0.0


def test_din_golden_snapshot():
    # frozen values from the loop-based reference forward pass
    s = DINScorer(10, 7, random_state=123, **SMALL)
    got = s.score(np.array([0, 3, 7, 1, 9, 2]), [0, 4, 6])
    expected = [-7.635230720539176e-06, 1.1728156205394276e-06, -8.040253622855038e-08]
    assert np.allclose(got, expected, rtol=1e-10, atol=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_din_matches_reference(seed):
    rng = np.random.default_rng(seed)
    s = scaled_din(small_din(seed), scale=0.7, rng=seed)
    h = rng.integers(0, 11, size=6)
    nodes = rng.integers(0, 7, size=3)
    got = s.score(h, nodes)
    ref = [din_reference(s.params, SMALL["window_sizes"], h, n) for n in nodes]
    assert np.allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_din_history_length_checked():
    with pytest.raises(ValueError):
        small_din().score(np.zeros(5, dtype=int), [0])


def test_din_missing_node_raises():
    with pytest.raises(IndexError):
        small_din().score(np.zeros(6, dtype=int), [7])


def test_dot_empty_history_and_single_item():
    s = DotScorer(5, 3, dim=4, random_state=0)
    assert s.score([0, 0, 0], [0, 1, 2]).tolist() == [0.0, 0.0, 0.0]
    e, w = s.params["item_emb"][2], s.params["node_emb"][1]
    assert s.score([0, 2], [1])[0] == pytest.approx(e @ w, rel=1e-14)


def test_dot_padding_invariance():
    s = DotScorer(9, 5, dim=4, random_state=1)
    h = [3, 4, 8]
    assert np.array_equal(s.score(h, range(5)), s.score([0, 0, 0, *h], range(5)))


def test_batch_equals_single_and_permutation():
    for s, h in ((scaled_din(small_din(4), rng=1), np.array([1, 0, 2, 3, 4, 5])),
                 (DotScorer(10, 7, random_state=2), np.array([1, 2, 0, 3]))):
        nodes = np.array([6, 1, 3, 0])
        batch = s.batch_score(h, nodes)
        singles = np.array([s.score(h, [n])[0] for n in nodes])
        assert np.allclose(batch, singles, rtol=0, atol=1e-12)
        perm = np.array([2, 0, 3, 1])
        assert np.allclose(s.score(h, nodes[perm]), batch[perm], rtol=0, atol=1e-12)


def test_score_many_matches_rows():
    rng = np.random.default_rng(0)
    for s, L in ((DotScorer(10, 7, random_state=2), 5), (scaled_din(small_din(3), rng=4), 6)):
        H = rng.integers(0, 11, size=(4, L))
        H[1] = 0
        M = s.score_many(H, [0, 3, 6])
        for r in range(4):
            assert np.allclose(M[r], s.score(H[r], [0, 3, 6]), rtol=0, atol=1e-12)


def test_dot_crafted_leaf_scores_monotone(prop1_tree, prop1_eta):
    # one-dimensional embeddings chosen so the leaf scores equal the target values
    s = DotScorer(8, prop1_tree.n_nodes, dim=1, random_state=0)
    s.params["item_emb"][1] = 1.0
    leaves = prop1_tree.gid(3, np.arange(8))
    s.params["node_emb"][leaves, 0] = prop1_eta[prop1_tree.leaf_items]
    got = s.batch_score([1], leaves)
    assert np.allclose(got, prop1_eta[1:])
    assert np.array_equal(np.argsort(got, kind="stable"), np.argsort(prop1_eta[1:], kind="stable"))


def test_forward_deterministic():
    s = scaled_din(small_din(5), rng=5)
    h = np.array([1, 2, 3, 4, 5, 6])
    assert np.array_equal(s.score(h, [1, 2]), s.score(h, [1, 2]))


@pytest.mark.parametrize("seed", range(4))
def test_dot_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    s = DotScorer(12, 9, dim=4, random_state=seed)
    for v in s.params.values():
        v[...] = rng.normal(size=v.shape)
    s.params["item_emb"][0] = 0
    h = rng.integers(0, 13, size=7)
    nodes = rng.integers(0, 9, size=5)
    dloss = lambda sc: full_softmax_grad(sc, 1, 1.0)  # noqa: E731
    assert relative_error(s, h, nodes, dloss, rng) < 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_din_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    s = scaled_din(small_din(seed), scale=0.8, rng=seed)
    h = rng.integers(0, 11, size=6)
    nodes = rng.integers(0, 7, size=4)
    q = rng.uniform(0.05, 0.5, size=3)
    dloss = lambda sc: sampled_softmax_grad(sc[0], sc[1:], q, 3, 1.0)  # noqa: E731
    assert relative_error(s, h, nodes, dloss, rng) < 1e-4


def test_table_scorer_backward():
    t = TableScorer([0.5, 1.0, -1.0])
    sc, cache = t.forward(None, [2, 2, 0])
    g = t.backward(cache, np.array([1.0, 2.0, 3.0]))
    assert g["node_score"].tolist() == [3.0, 0.0, 3.0]


def test_adam_zero_gradient_keeps_params():
    s = small_din()
    before = {k: v.copy() for k, v in s.params.items()}
    opt = Adam()
    for _ in range(3):
        opt.step(s.params, s.zero_grads())
    for k in before:
        assert np.array_equal(before[k], s.params[k])


def test_adam_hand_trajectory():
    # scalar parameter, gradients 1, -2, 0.5, lr 0.1, hand-evaluated Adam updates
    p = {"x": np.array([1.0])}
    opt = Adam(lr=0.1)
    expected = []
    m = v = 0.0
    x = 1.0
    for t, g in enumerate([1.0, -2.0, 0.5], start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        expected.append(x)
    got = []
    for g in [1.0, -2.0, 0.5]:
        opt.step(p, {"x": np.array([g])})
        got.append(p["x"][0])
    assert np.allclose(got, expected, rtol=1e-14)
    assert got[0] == pytest.approx(0.9, abs=1e-7)
    assert Adam().lr == 1e-3


def test_padding_row_rezeroed():
    s = DotScorer(4, 3, random_state=0)
    g = s.zero_grads()
    g["item_emb"][0] = 5.0
    apply_gradients(s.params, g, lr=0.1)
    assert np.all(s.params["item_emb"][0] == 0)
    SGD(0.1).step(s.params, g)
    assert np.all(s.params["item_emb"][0] == 0)


def test_shape_mismatch_raises():
    s = DotScorer(4, 3, random_state=0)
    with pytest.raises(ValueError):
        apply_gradients(s.params, {"item_emb": np.zeros((2, 2))})


@pytest.mark.parametrize("make", [lambda: small_din(7), lambda: DotScorer(6, 4, random_state=1),
                                  lambda: TableScorer([1.0, 2.0])])
def test_checkpoint_roundtrip(tmp_path, make):
    s = make()
    save_params(s, tmp_path / "p.bin")
    back = load_params(tmp_path / "p.bin")
    assert type(back) is type(s)
    for k in s.params:
        assert np.array_equal(back.params[k], s.params[k])
    if isinstance(s, DINScorer):
        assert back.window_sizes == s.window_sizes
        h = np.array([1, 2, 3, 4, 5, 6])
        assert np.array_equal(back.score(h, [0, 1]), s.score(h, [0, 1]))


def test_checkpoint_errors(tmp_path):
    s = DotScorer(6, 4, random_state=1)
    save_params(s, tmp_path / "p.bin")
    blob = (tmp_path / "p.bin").read_bytes()
    with pytest.raises(CheckpointError, match="header"):
        parse_tensors(b"nope" + blob)
    with pytest.raises(CheckpointError, match="truncated"):
        parse_tensors(blob[:-5])
    with pytest.raises(CheckpointError, match="trailing"):
        parse_tensors(blob + b"x")
