"""Layer-wise beam search over the tree index."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tree import TreeIndex


def topk_select(candidates, scores, k: int) -> np.ndarray:
    """k best candidates by score; ties go to the smaller index. Returns them best-first."""
    candidates = np.asarray(candidates, dtype=np.int64)
    scores = np.asarray(scores, dtype=float)
    if candidates.size == 0:
        raise ValueError("no candidates")
    order = np.lexsort((candidates, -scores))
    return candidates[order[:k]]


def expand(tree: TreeIndex, level: int, selected) -> np.ndarray:
    """Sorted, duplicate-free 0-based children at ``level`` of the selected nodes at ``level - 1``."""
    ptr = tree.child_ptr[level - 1]
    sel = np.unique(np.asarray(selected, dtype=np.int64))
    if sel.size == 0:
        return sel
    return np.concatenate([np.arange(ptr[i], ptr[i + 1]) for i in sel])


@dataclass
class BeamTrace:
    selected: list[np.ndarray] = field(default_factory=list)
    expanded: list[np.ndarray] = field(default_factory=list)
    n_scored: int = 0


def retrieve_topk(tree: TreeIndex, scorer, history, k: int, n_results: int | None = None,
                  trace: BeamTrace | None = None):
    """Beam search with beam size ``k``; returns ``(items, scores)`` best-first.

    All leaves reached are collected and ranked at the end; ``n_results``
    (default ``k``) of them are returned.
    """
    if k < 1:
        raise ValueError("beam size must be >= 1")
    n_results = k if n_results is None else n_results
    selected = np.zeros(1, dtype=np.int64)
    leaves = leaf_scores = None
    for j in range(1, tree.height + 1):
        cand = expand(tree, j, selected)
        s = scorer.score(history, tree.gid(j, cand))
        if trace is not None:
            trace.expanded.append(cand + 1)
            trace.n_scored += cand.size
        if j == tree.height:
            leaves, leaf_scores = cand, s
            break
        selected = topk_select(cand, s, k)
        if trace is not None:
            trace.selected.append(np.sort(selected) + 1)
    if leaves is None:  # single-item tree
        return tree.leaf_items[:1].copy(), np.zeros(1)
    order = np.lexsort((leaves, -leaf_scores))[:n_results]
    if trace is not None:
        trace.selected.append(np.sort(leaves[order]) + 1)
    return tree.leaf_items[leaves[order]], leaf_scores[order]
