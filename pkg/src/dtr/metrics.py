"""Retrieval metrics and brute-force oracles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .beam import retrieve_topk
from .tree import TreeIndex


def precision_recall_f(retrieved, truth, k: int) -> tuple[float, float, float]:
    truth = set(int(x) for x in truth)
    if not truth:
        raise ValueError("empty ground truth")
    hits = len(set(int(x) for x in list(retrieved)[:k]) & truth)
    p, r = hits / k, hits / len(truth)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class MetricReport:
    ks: tuple[int, ...]
    precision: dict[int, float] = field(default_factory=dict)
    recall: dict[int, float] = field(default_factory=dict)
    f_measure: dict[int, float] = field(default_factory=dict)
    n_users: int = 0
    n_skipped: int = 0

    def to_tsv(self) -> str:
        lines = ["K\tprecision\trecall\tf_measure\tn_users"]
        for k in self.ks:
            lines.append(f"{k}\t{self.precision[k]:.6f}\t{self.recall[k]:.6f}\t"
                         f"{self.f_measure[k]:.6f}\t{self.n_users}")
        return "\n".join(lines) + "\n"


def evaluate(retrieved: dict, truth: dict, ks=(20,)) -> MetricReport:
    """Per-user mean P/R/F at each K. Users with empty truth are skipped and counted."""
    ks = tuple(int(k) for k in ks)
    sums = {k: np.zeros(3) for k in ks}
    n = skipped = 0
    for user, got in retrieved.items():
        g = truth.get(user)
        if not g:
            skipped += 1
            continue
        n += 1
        for k in ks:
            sums[k] += precision_recall_f(got, g, k)
    rep = MetricReport(ks, n_users=n, n_skipped=skipped)
    for k in ks:
        p, r, f = sums[k] / max(n, 1)
        rep.precision[k], rep.recall[k], rep.f_measure[k] = float(p), float(r), float(f)
    return rep


def exhaustive_topk(tree: TreeIndex, scorer, history, k: int):
    """Score every leaf; same ranking and tie rule as the beam search."""
    leaves = np.arange(tree.n_items)
    s = scorer.score(history, tree.gid(tree.height, leaves))
    order = np.lexsort((leaves, -s))[:k]
    return tree.leaf_items[order], s[order]


def bayes_topk(eta, k: int) -> np.ndarray:
    """Item ids of the k largest eta entries (index 0 ignored), smallest id first on ties."""
    eta = np.asarray(eta, dtype=float)
    ids = np.arange(1, eta.size)
    order = np.lexsort((ids, -eta[1:]))[:k]
    return ids[order]


def full_softmax_gradient(scores, pos: int, weight: float = 1.0) -> np.ndarray:
    """weight * (softmax(scores) - onehot(pos)), 1-based ``pos``."""
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite score")
    e = np.exp(scores - scores.max())
    g = e / e.sum()
    g[pos - 1] -= 1.0
    return weight * g


def retrieve_users(tree: TreeIndex, scorer, users, beam_size: int, n_results: int,
                   exhaustive: bool = False) -> dict:
    """Ranked item ids per ``EvalUser`` from beam search (or exhaustive scoring)."""
    out = {}
    for u in users:
        if exhaustive:
            items, _ = exhaustive_topk(tree, scorer, u.history, n_results)
        else:
            items, _ = retrieve_topk(tree, scorer, u.history, max(beam_size, 1), n_results=n_results)
        out[u.user] = items
    return out


def evaluate_users(tree: TreeIndex, scorer, users, beam_size: int, ks=(20,),
                   exhaustive: bool = False, retrieved: dict | None = None) -> MetricReport:
    """P/R/F of retrieval for every ``EvalUser``; ranked lists are stored in ``retrieved`` if given."""
    users = list(users)
    got = retrieve_users(tree, scorer, users, beam_size, max(ks), exhaustive)
    if retrieved is not None:
        retrieved.update(got)
    return evaluate(got, {u.user: u.labels for u in users}, ks)
