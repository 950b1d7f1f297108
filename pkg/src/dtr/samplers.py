"""Negative-node samplers and sampling-distribution diagnostics.

Tree-based sampling walks from the root to a leaf, picking one child per
step from the local softmax over the children's scores. A node's sampling
probability is the product of the local probabilities along its path, so every
level's probabilities sum to one and, under proportional scores, equal the
level softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tree import NodeId, TreeIndex

MAX_PATH_FACTOR = 64


@dataclass(frozen=True)
class LayerSample:
    layer: int
    pos: int                # 1-based
    negatives: np.ndarray   # 1-based indices, a multiset
    q: np.ndarray           # sampling probability per occurrence

    @property
    def size(self) -> int:
        return int(self.negatives.size)


@dataclass(frozen=True)
class SampledPath:
    indices: tuple[int, ...]       # 1-based index per level 0..H
    probabilities: tuple[float, ...]


def _group_softmax(scores, starts, owner):
    """Softmax inside contiguous groups; ``owner[k]`` is the group of entry k."""
    m = np.maximum.reduceat(scores, starts)
    e = np.exp(scores - m[owner])
    z = np.add.reduceat(e, starts)
    return e / z[owner]


def layer_scores(tree: TreeIndex, scorer, history, level: int) -> np.ndarray:
    return scorer.score(history, tree.gid(level, np.arange(tree.level_sizes[level])))


def layer_softmax(tree: TreeIndex, scorer, history, level: int) -> np.ndarray:
    s = layer_scores(tree, scorer, history, level)
    return _group_softmax(s, np.array([0]), np.zeros(s.size, dtype=np.int64))


# -- uniform ---------------------------------------------------------------

def uniform_layer_sample(n_nodes: int, pos: int, M: int, rng=None, layer: int = 0) -> LayerSample:
    """M draws with replacement from the n_nodes - 1 negatives of a level (1-based pos)."""
    if n_nodes < 2:
        raise ValueError("a level with a single node has no negatives")
    rng = np.random.default_rng(rng)
    draws = rng.integers(0, n_nodes - 1, size=M)
    draws = draws + (draws >= pos - 1)
    return LayerSample(layer, pos, draws + 1, np.full(M, 1.0 / (n_nodes - 1)))


# -- tree-based --------------------------------------------------------------

def expanding_probability(tree: TreeIndex, scorer, history, node: NodeId) -> np.ndarray:
    """Local softmax over the children of ``node``."""
    kids = tree.children_of(node)
    if not kids:
        raise ValueError("leaf nodes have no children")
    s = scorer.score(history, [tree.node_gid(k) for k in kids])
    e = np.exp(s - s.max())
    return e / e.sum()


def walk_paths(tree: TreeIndex, scorer, history, n_paths: int, rng):
    """Draw ``n_paths`` root-to-leaf walks in parallel.

    Returns ``(idx, q)``: 0-based node index and cumulative sampling
    probability per path and level (column 0 is the root).
    """
    H = tree.height
    idx = np.zeros((n_paths, H + 1), dtype=np.int64)
    q = np.ones((n_paths, H + 1))
    cur = idx[:, 0]
    for j in range(H):
        uniq, inv = np.unique(cur, return_inverse=True)
        ptr = tree.child_ptr[j]
        starts = ptr[uniq]
        counts = ptr[uniq + 1] - starts
        width = int(counts.max())
        cols = np.arange(width)
        valid = cols[None, :] < counts[:, None]
        kids = (starts[:, None] + cols[None, :])[valid]
        s = scorer.score(history, tree.gid(j + 1, kids))
        logits = np.full(valid.shape, -np.inf)
        logits[valid] = s
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        cum = np.cumsum(probs, axis=1)
        r = rng.random(n_paths)
        choice = np.minimum((cum[inv] <= r[:, None]).sum(axis=1), counts[inv] - 1)
        cur = starts[inv] + choice
        idx[:, j + 1] = cur
        q[:, j + 1] = q[:, j] * probs[inv, choice]
    return idx, q


def sample_path(tree: TreeIndex, scorer, history, rng=None) -> SampledPath:
    idx, q = walk_paths(tree, scorer, history, 1, np.random.default_rng(rng))
    return SampledPath(tuple(int(i) + 1 for i in idx[0]), tuple(float(x) for x in q[0]))


def negatives_per_level(M, height: int) -> np.ndarray:
    """``M`` as one count per level 0..H (an int applies to every level)."""
    m = np.full(height + 1, M, dtype=np.int64) if np.ndim(M) == 0 else np.asarray(M, dtype=np.int64)
    if m.shape != (height + 1,) or np.any(m[1:] < 1):
        raise ValueError("need a positive negative count for every level 1..H")
    return m


def tree_sample_batch(tree: TreeIndex, scorer, history, pos_path, M, rng=None,
                      max_paths: int | None = None) -> list[LayerSample]:
    """M negatives per level 1..H from repeated walks (``M`` may differ per level).

    ``pos_path`` holds the positive's 0-based index at every level 0..H. A walk
    node equal to the level positive is dropped for that level only and the
    stored q stays the unconditioned path probability. Levels with a single
    node yield an empty sample. If a level is still short after ``max_paths``
    walks (positive nearly certain), the rest is filled uniformly with
    q = 1 / (N_j - 1).
    """
    rng = np.random.default_rng(rng)
    H = tree.height
    m = negatives_per_level(M, H)
    budget = MAX_PATH_FACTOR * int(m[1:].max()) if max_paths is None else max_paths
    sizes = tree.level_sizes
    active = [j for j in range(1, H + 1) if sizes[j] >= 2]
    negs = {j: [] for j in active}
    qs = {j: [] for j in active}
    have = {j: 0 for j in active}
    drawn, batch = 0, int(m[1:].max())
    while active and any(have[j] < m[j] for j in active) and drawn < budget:
        batch = min(batch, budget - drawn)
        idx, q = walk_paths(tree, scorer, history, batch, rng)
        drawn += batch
        for j in active:
            need = m[j] - have[j]
            if need <= 0:
                continue
            keep = np.flatnonzero(idx[:, j] != pos_path[j])[:need]
            negs[j].append(idx[keep, j])
            qs[j].append(q[keep, j])
            have[j] += keep.size
        batch *= 2
    out = []
    for j in range(1, H + 1):
        if j not in negs:
            out.append(LayerSample(j, int(pos_path[j]) + 1, np.zeros(0, dtype=np.int64), np.zeros(0)))
            continue
        if have[j] < m[j]:
            fill = uniform_layer_sample(int(sizes[j]), int(pos_path[j]) + 1, int(m[j] - have[j]), rng, j)
            negs[j].append(fill.negatives - 1)
            qs[j].append(fill.q)
        out.append(LayerSample(j, int(pos_path[j]) + 1,
                               np.concatenate(negs[j]) + 1, np.concatenate(qs[j])))
    return out


def uniform_sample_batch(tree: TreeIndex, pos_path, M, rng=None) -> list[LayerSample]:
    rng = np.random.default_rng(rng)
    m = negatives_per_level(M, tree.height)
    out = []
    for j in range(1, tree.height + 1):
        n = int(tree.level_sizes[j])
        if n < 2:
            out.append(LayerSample(j, int(pos_path[j]) + 1, np.zeros(0, dtype=np.int64), np.zeros(0)))
        else:
            out.append(uniform_layer_sample(n, int(pos_path[j]) + 1, int(m[j]), rng, j))
    return out


# -- exact distributions ------------------------------------------------------

def layer_probability_vectors(tree: TreeIndex, scorer, history, upto: int | None = None,
                              node_scores=None) -> list[np.ndarray]:
    """Exact tree-sampling probability of every node, levels 0..upto.

    ``node_scores`` (indexed by global node id) short-circuits the scorer.
    """
    upto = tree.height if upto is None else upto
    out = [np.ones(1)]
    for j in range(upto):
        n = tree.level_sizes[j + 1]
        if node_scores is None:
            s = layer_scores(tree, scorer, history, j + 1)
        else:
            s = np.asarray(node_scores)[tree.gid(j + 1, np.arange(n))]
        par = tree.parents[j + 1]
        local = _group_softmax(s, tree.child_ptr[j][:-1], par)
        out.append(out[-1][par] * local)
    return out


def layer_probability_vector(tree: TreeIndex, scorer, history, level: int) -> np.ndarray:
    return layer_probability_vectors(tree, scorer, history, level)[level]


def kl_divergence(q, p) -> float:
    """KL(q || p); +inf if q puts mass where p has none."""
    q, p = np.asarray(q, float), np.asarray(p, float)
    if q.shape != p.shape:
        raise ValueError("length mismatch")
    if abs(q.sum() - 1) > 1e-6 or abs(p.sum() - 1) > 1e-6:
        raise ValueError("inputs must be probability vectors")
    mask = q > 0
    if np.any(p[mask] <= 0):
        return float("inf")
    return float(np.sum(q[mask] * np.log(q[mask] / p[mask])))


def positive_exclusion_bias(q_level, pos0: int) -> float:
    """Largest gap between stored q and the realised negative distribution.

    Dropping walks that hit the positive turns the negative distribution into
    q_i / (1 - q_pos); training still uses q_i.
    """
    q = np.asarray(q_level, float)
    rest = 1.0 - q[pos0]
    if rest <= 0:
        return float("inf")
    cond = q / rest
    cond[pos0] = 0.0
    diff = np.abs(cond - q)
    diff[pos0] = 0.0
    return float(diff.max())


@dataclass(frozen=True)
class LayerDiagnostic:
    layer: int
    n_nodes: int
    sum_q: float
    kl: float
    max_bias: float


def diagnose(tree: TreeIndex, scorer, history) -> list[LayerDiagnostic]:
    qs = layer_probability_vectors(tree, scorer, history)
    rows = []
    for j in range(1, tree.height + 1):
        p = layer_softmax(tree, scorer, history, j)
        q = qs[j]
        rows.append(LayerDiagnostic(j, int(tree.level_sizes[j]), float(q.sum()),
                                    kl_divergence(q, p), float(np.abs(q - p).max())))
    return rows


# -- score constructions for the sampling theory -----------------------------

def proportional_scores(tree: TreeIndex, leaf_scores, level_log_coef=None) -> np.ndarray:
    """Node scores with exp(o_parent) = c_level * sum over children of exp(o_child)."""
    H = tree.height
    coef = np.zeros(H + 1) if level_log_coef is None else np.asarray(level_log_coef, float)
    scores = np.zeros(tree.n_nodes)
    cur = np.asarray(leaf_scores, dtype=float)
    scores[tree.gid(H, np.arange(cur.size))] = cur
    for j in range(H - 1, -1, -1):
        starts = tree.child_ptr[j][:-1]
        m = np.maximum.reduceat(cur, starts)
        lse = m + np.log(np.add.reduceat(np.exp(cur - m[tree.parents[j + 1]]), starts))
        cur = coef[j] + lse
        scores[tree.gid(j, np.arange(cur.size))] = cur
    return scores


def max_proportional_scores(tree: TreeIndex, eps: float, rng=None, level_log_coef=None,
                            root_score: float = 0.0):
    """Top-down scores with exp(o_parent) = c_level * max child exp(o) and
    every sibling group's max share lambda strictly inside (1 - eps, 1).

    Every internal node needs at least two children. Returns ``(scores, lam)``
    where ``lam`` is indexed by global node id (nan for leaves).
    """
    rng = np.random.default_rng(rng)
    H = tree.height
    coef = np.zeros(H + 1) if level_log_coef is None else np.asarray(level_log_coef, float)
    scores = np.zeros(tree.n_nodes)
    lam = np.full(tree.n_nodes, np.nan)
    scores[0] = root_score
    for j in range(H):
        ptr = tree.child_ptr[j]
        for i in range(tree.level_sizes[j]):
            lo, hi = ptr[i], ptr[i + 1]
            c = hi - lo
            if c < 2:
                raise ValueError("construction needs >= 2 children per internal node")
            top = scores[tree.gid(j, i)] - coef[j]
            gap0 = np.log((c - 1) * (1 - eps) / eps)
            child = top - (gap0 + rng.uniform(0.1, 2.0, size=c))
            child[rng.integers(c)] = top
            scores[tree.gid(j + 1, np.arange(lo, hi))] = child
            e = np.exp(child - top)
            lam[tree.gid(j, i)] = 1.0 / e.sum()
    return scores, lam


def bias_bound(level: int, eps: float) -> float:
    return (level - 1) * eps / (1 - eps)


def kl_bound(level: int, eps: float, n_nodes: int, score_bound: float) -> float:
    return float(np.log1p(bias_bound(level, eps) * n_nodes * np.exp(2 * score_bound)))
