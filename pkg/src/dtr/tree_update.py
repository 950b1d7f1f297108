"""Re-learning the item-to-leaf mapping with the scorer frozen.

Items are pushed down the tree ``d`` levels at a time. Inside a subproblem
every item gets a matching score per candidate node (the summed log softmax
of that candidate over the item's training users) and a greedy,
capacity-respecting pass places the items.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tree import TreeIndex

DEFAULT_STRIDE = 7


def _log_softmax_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=1, keepdims=True))


def matching_scores(scorer, candidates, histories_per_item) -> tuple[np.ndarray, np.ndarray]:
    """Matching-score matrix ``(n_items, c)`` and a has-data mask.

    ``candidates`` are global node ids; ``histories_per_item[i]`` is a (possibly
    empty) 2-D array of user histories whose target is the i-th item. Items
    with no users score 0 everywhere.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    n = len(histories_per_item)
    counts = np.array([len(h) for h in histories_per_item], dtype=np.int64)
    out = np.zeros((n, candidates.size))
    has = counts > 0
    if candidates.size < 2 or not has.any():
        return out, has
    stacked = np.concatenate([np.asarray(histories_per_item[i]) for i in np.flatnonzero(has)])
    ls = _log_softmax_rows(scorer.score_many(stacked, candidates))
    starts = np.concatenate([[0], np.cumsum(counts[has])[:-1]])
    out[has] = np.add.reduceat(ls, starts, axis=0)
    return out, has


def assignment_order(scores, item_ids, has_data=None) -> np.ndarray:
    """Processing order: items with data by descending best-minus-second margin, then by id;
    items without data last, by id."""
    scores = np.asarray(scores, dtype=float)
    item_ids = np.asarray(item_ids)
    n, c = scores.shape
    has_data = np.ones(n, dtype=bool) if has_data is None else np.asarray(has_data, dtype=bool)
    if c >= 2:
        top2 = -np.partition(-scores, 1, axis=1)[:, :2]
        margin = top2[:, 0] - top2[:, 1]
    else:
        margin = np.zeros(n)
    return np.lexsort((item_ids, -margin, ~has_data))


def assign_items(scores, capacities, item_ids=None, has_data=None) -> np.ndarray:
    """Greedy capacity-constrained assignment; returns the candidate position of each item.

    Each item, in ``assignment_order``, takes its best-scoring candidate that
    still has room, falling through by descending score (lower candidate
    position first on ties).
    """
    scores = np.asarray(scores, dtype=float)
    cap = np.asarray(capacities, dtype=np.int64).copy()
    n, c = scores.shape
    if cap.shape != (c,) or np.any(cap < 0) or cap.sum() != n:
        raise ValueError(f"infeasible capacities: {cap.tolist()} for {n} items")
    item_ids = np.arange(n) if item_ids is None else np.asarray(item_ids)
    out = np.full(n, -1, dtype=np.int64)
    cand = np.arange(c)
    for i in assignment_order(scores, item_ids, has_data):
        for k in np.lexsort((cand, -scores[i])):
            if cap[k] > 0:
                cap[k] -= 1
                out[i] = k
                break
    return out


@dataclass
class AssignmentProblem:
    level: int              # level of the subtree root
    node: int               # 0-based index of the subtree root
    items: np.ndarray
    target_level: int
    candidates: np.ndarray  # 0-based indices at target_level
    capacities: np.ndarray
    assignment: np.ndarray | None = None   # candidate position per item once solved

    def check(self) -> None:
        if self.capacities.sum() != self.items.size:
            raise ValueError("capacities do not match the number of items")


def descendants(tree: TreeIndex, level: int, node: int, target: int) -> np.ndarray:
    """0-based indices at ``target`` under the 0-based ``node`` of ``level`` (contiguous)."""
    lo, hi = node, node + 1
    for j in range(level, target):
        ptr = tree.child_ptr[j]
        lo, hi = ptr[lo], ptr[hi]
    return np.arange(lo, hi)


def make_problem(tree: TreeIndex, level: int, node: int, items, stride: int) -> AssignmentProblem:
    tgt = min(tree.height, level + stride)
    cand = descendants(tree, level, node, tgt)
    cap = tree.leaf_hi[tgt][cand] - tree.leaf_lo[tgt][cand]
    return AssignmentProblem(level, node, np.sort(np.asarray(items, dtype=np.int64)), tgt, cand, cap)


def group_histories(instances) -> dict[int, list[np.ndarray]]:
    """A_y: histories of the training pairs whose target is y."""
    out: dict[int, list[np.ndarray]] = {}
    for inst in instances:
        hist, target = (inst.history, inst.target) if hasattr(inst, "target") else inst
        out.setdefault(int(target), []).append(np.asarray(hist, dtype=np.int64))
    return out


def update_tree(tree: TreeIndex, scorer, instances, stride: int = DEFAULT_STRIDE,
                problems: list | None = None) -> TreeIndex:
    """New tree with the same shape and a re-learned leaf-to-item mapping.

    ``instances`` yields objects with ``history``/``target`` or ``(history, target)``
    pairs. Solved subproblems are appended to ``problems`` when given.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    by_item = group_histories(instances)
    empty = np.zeros((0, 0), dtype=np.int64)
    hist = {y: np.stack(h) for y, h in by_item.items()}
    H = tree.height
    new_leaves = np.full(tree.n_items, -1, dtype=np.int64)
    stack = [make_problem(tree, 0, 0, tree.leaf_items, stride)]
    while stack:
        prob = stack.pop()
        prob.check()
        if problems is not None:
            problems.append(prob)
        if prob.candidates.size == 1:
            where = np.zeros(prob.items.size, dtype=np.int64)
        else:
            gids = tree.gid(prob.target_level, prob.candidates)
            S, has = matching_scores(scorer, gids, [hist.get(int(y), empty) for y in prob.items])
            where = assign_items(S, prob.capacities, prob.items, has)
        prob.assignment = where
        if prob.target_level == H:
            new_leaves[prob.candidates[where]] = prob.items
            continue
        for k, node in enumerate(prob.candidates):
            stack.append(make_problem(tree, prob.target_level, int(node),
                                      prob.items[where == k], stride))
    return tree.with_leaf_items(new_leaves)


def check_bijection(old: TreeIndex, new: TreeIndex) -> None:
    """Raise unless ``new`` has the same shape and holds exactly the same items."""
    if old.branching != new.branching or not np.array_equal(old.level_sizes, new.level_sizes):
        raise AssertionError("tree shape changed")
    if not np.array_equal(np.sort(old.leaf_items), np.sort(new.leaf_items)):
        raise AssertionError("leaf mapping is not a bijection onto the item set")
