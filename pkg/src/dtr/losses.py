"""Layer-wise softmax losses, rectified labels and sampled-softmax adjustment.

Indices in this module follow the public 1-based convention of ``TreeIndex``
(``pos`` is the 1-based position of the positive class in ``scores``), except
for the ``*_grad`` helpers used by the trainer, which take 0-based positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tree import TreeIndex


def log_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = x.max()
    return x - m - np.log(np.exp(x - m).sum())


def softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max())
    return e / e.sum()


def _check_finite(scores):
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite score")
    return scores


def layer_softmax_ce(scores, pos: int) -> float:
    """Multi-class cross-entropy of the 1-based positive ``pos``."""
    scores = _check_finite(scores)
    if not 1 <= pos <= scores.size:
        raise IndexError(f"positive index {pos} outside [1, {scores.size}]")
    return float(-log_softmax(scores)[pos - 1])


def modified_bregman_loss(w: float, scores, pos: int) -> float:
    """Weighted cross-entropy plus the constant w log w + w - 1 (0 log 0 := 0)."""
    if w < 0:
        raise ValueError("weight must be non-negative")
    wlogw = w * np.log(w) if w > 0 else 0.0
    ce = layer_softmax_ce(scores, pos) if w > 0 else 0.0
    return float(w * ce + wlogw + w - 1.0)


def bregman_divergence(z, p) -> float:
    """D_psi(z, p) for psi(x) = sum x log x with 0 log 0 := 0."""
    z, p = np.asarray(z, float), np.asarray(p, float)
    xlogx = lambda v: np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0)  # noqa: E731
    return float(xlogx(z).sum() - xlogx(p).sum() - ((np.log(p) + 1.0) * (z - p)).sum())


@dataclass(frozen=True)
class LayerTarget:
    layer: int
    pos: int          # 1-based index of the positive node in its level
    weight: float     # rectified label, 0 or 1 in practical training
    normalized: float | None = None


def practical_layer_loss(scores, target: LayerTarget) -> float:
    if target.weight == 0:
        return 0.0
    return float(target.weight * layer_softmax_ce(scores, target.pos))


def tree_loss(layer_scores, targets) -> float:
    """Sum of per-layer practical losses over the given layers."""
    return float(sum(practical_layer_loss(s, t) for s, t in zip(layer_scores, targets)))


# -- rectification --------------------------------------------------------------

def subtree_winner_ranks(tree: TreeIndex, eta) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-item rank under (eta desc, item id asc) and the best rank under every node.

    ``eta`` is indexed by item id. Returns ``(rank, best)`` where ``best[j][i]`` is
    the smallest rank among items under the 0-based node ``i`` of level ``j``.
    """
    eta = np.asarray(eta, dtype=float)
    items = tree.leaf_items
    order = np.lexsort((items, -eta[items]))
    rank = np.empty(int(items.max()) + 1, dtype=np.int64)
    rank[items[order]] = np.arange(items.size)
    leaf_rank = rank[items]
    best = [np.minimum.reduceat(leaf_rank, tree.leaf_lo[j]) for j in range(tree.height + 1)]
    return rank, best


def rectified_weight(item: int, layer: int, tree: TreeIndex, eta, *, table=None) -> int:
    """1 iff ``item`` is the (smallest-id) eta-maximiser under its level-``layer`` ancestor."""
    rank, best = table if table is not None else subtree_winner_ranks(tree, eta)
    anc = tree.path_indices(item)[layer]
    return int(rank[item] == best[layer][anc])


def rectified_weights(item: int, tree: TreeIndex, rank, best) -> np.ndarray:
    """Rectified labels for every level 0..H of the item's path."""
    path = tree.path_indices(item)
    r = rank[item]
    return np.array([int(r == best[j][path[j]]) for j in range(tree.height + 1)])


def normalization_alpha(tree: TreeIndex, layer: int, eta) -> float:
    """Sum over level nodes of the largest eta under each node (diagnostics only)."""
    eta = np.asarray(eta, dtype=float)
    vals = eta[tree.leaf_items]
    return float(np.maximum.reduceat(vals, tree.leaf_lo[layer]).sum())


def layer_expectations(tree: TreeIndex, eta, rectified: bool) -> list[np.ndarray]:
    """Expected layer label vectors: subtree sums (plain) or subtree maxima (rectified)."""
    vals = np.asarray(eta, dtype=float)[tree.leaf_items]
    op = np.maximum if rectified else np.add
    return [op.reduceat(vals, tree.leaf_lo[j]) for j in range(tree.height + 1)]


def layer_targets(item: int, tree: TreeIndex, eta=None, *, table=None) -> list[LayerTarget]:
    """Targets for levels 1..H; weights are 1 unless an eta source/table is given."""
    path = tree.path_indices(item)
    if table is None and eta is not None:
        table = subtree_winner_ranks(tree, eta)
    if table is None:
        w = np.ones(tree.height + 1, dtype=int)
    else:
        w = rectified_weights(item, tree, *table)
    out = []
    for j in range(1, tree.height + 1):
        norm = None
        if eta is not None:
            norm = w[j] / normalization_alpha(tree, j, eta)
        out.append(LayerTarget(j, int(path[j]) + 1, float(w[j]), norm))
    return out


# -- sampled softmax --------------------------------------------------------------

@dataclass(frozen=True)
class AdjustedLogits:
    positive: float
    negatives: np.ndarray


def adjust_logits(pos_score: float, neg_scores, q, M: int) -> AdjustedLogits:
    """Subtract ln(M q) from every sampled negative occurrence; the positive is untouched."""
    q = np.asarray(q, dtype=float)
    neg_scores = np.asarray(neg_scores, dtype=float)
    if q.shape != neg_scores.shape:
        raise ValueError("one probability per negative occurrence is required")
    if np.any(q <= 0):
        raise ValueError("sampling probabilities must be positive")
    return AdjustedLogits(float(pos_score), neg_scores - np.log(M * q))


def sampled_softmax_loss(adjusted: AdjustedLogits, weight: float = 1.0) -> float:
    if weight == 0:
        return 0.0
    logits = np.concatenate([[adjusted.positive], adjusted.negatives])
    return float(-weight * log_softmax(logits)[0])


def sampled_softmax_grad(pos_score, neg_scores, q, M, weight=1.0):
    """Loss and d loss / d (pos_score, neg_scores) with q held constant."""
    adj = adjust_logits(pos_score, neg_scores, q, M)
    logits = np.concatenate([[adj.positive], adj.negatives])
    ls = log_softmax(logits)
    loss = -weight * ls[0]
    g = weight * np.exp(ls)
    g[0] -= weight
    return float(loss), g


def full_softmax_grad(scores, pos0: int, weight=1.0):
    """Loss and gradient of the weighted full-layer cross-entropy (0-based positive)."""
    ls = log_softmax(scores)
    g = weight * np.exp(ls)
    g[pos0] -= weight
    return float(-weight * ls[pos0]), g


def expected_layer_weights(tree: TreeIndex, eta, level: int) -> np.ndarray:
    """Exact E[rectified label] per level node when the target is drawn from eta."""
    rank, best = subtree_winner_ranks(tree, eta)
    eta = np.asarray(eta, dtype=float)
    out = np.zeros(tree.level_sizes[level])
    for item in tree.leaf_items:
        anc = tree.path_indices(int(item))[level]
        if rank[item] == best[level][anc]:
            out[anc] += eta[item]
    return out

