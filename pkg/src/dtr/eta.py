"""Sources of the conditional item distribution eta(y | u) used for rectification.

Every source maps a user context to a dense vector indexed by item id (entry 0
is padding and always 0). ``context(user, history)`` picks the cache key;
``vector(key)`` returns the distribution for that key.
"""

from __future__ import annotations

import csv
from collections import defaultdict

import numpy as np

from .losses import subtree_winner_ranks
from .tree import NodeId, TreeIndex


class EtaSource:
    n_items: int

    def context(self, user, history):
        raise NotImplementedError

    def vector(self, key) -> np.ndarray:
        raise NotImplementedError

    def vector_for(self, user, history) -> np.ndarray:
        return self.vector(self.context(user, history))

    def prob(self, user, item: int, history=None) -> float:
        return float(self.vector_for(user, history)[item])


class OracleEta(EtaSource):
    """Exact table lookup: user -> cluster key -> eta vector."""

    def __init__(self, table: dict, user_context: dict | None = None):
        self.table = {k: np.asarray(v, dtype=float) for k, v in table.items()}
        self.user_context = user_context
        self.n_items = len(next(iter(self.table.values()))) - 1

    def context(self, user, history=None):
        key = user if self.user_context is None else self.user_context.get(user)
        if key not in self.table:
            raise KeyError(f"no eta for user {user!r}")
        return key

    def vector(self, key):
        return self.table[key]

    def prob(self, user, item, history=None):
        if not 1 <= item <= self.n_items:
            raise KeyError(f"unknown item {item}")
        return float(self.vector(self.context(user))[item])


class EmpiricalEta(EtaSource):
    """Smoothed next-item frequencies bucketed by the last history item.

    Counts every consecutive (previous, next) pair of the training sequences.
    Histories without a real item fall in bucket 0.
    """

    def __init__(self, n_items: int, smoothing: float = 1.0):
        self.n_items = n_items
        self.smoothing = smoothing
        self.counts: dict[int, np.ndarray] = {}

    def fit(self, sequences):
        counts = defaultdict(lambda: np.zeros(self.n_items + 1))
        n = 0
        for seq in sequences:
            seq = [int(x) for x in seq if x > 0]
            prev = 0
            for item in seq:
                counts[prev][item] += 1
                prev = item
                n += 1
        if n == 0:
            raise ValueError("empty training set")
        self.counts = dict(counts)
        return self

    def context(self, user, history):
        real = np.asarray(history)[np.asarray(history) > 0]
        return int(real[-1]) if real.size else 0

    def vector(self, key):
        c = self.counts.get(key)
        v = np.full(self.n_items + 1, self.smoothing, dtype=float) if c is None else c + self.smoothing
        v[0] = 0.0
        total = v.sum()
        if total <= 0:
            v[1:] = 1.0
            total = self.n_items
        return v / total


class FileEta(EtaSource):
    """eta rows ``user_key item_id probability`` read from a TSV; missing pairs are 0."""

    def __init__(self, path, n_items: int, user_context: dict | None = None,
                 item_index: dict | None = None):
        # item_index maps raw item ids in the file to dense ids; unmapped items are skipped
        self.n_items = n_items
        self.user_context = user_context
        self.table: dict[str, np.ndarray] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
                try:
                    key, item, p = row[0], int(row[1]), float(row[2])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
                if item_index is not None:
                    if item not in item_index:
                        continue
                    item = item_index[item]
                if not 1 <= item <= n_items:
                    raise ValueError(f"{path}:{lineno}: item {item} outside [1, {n_items}]")
                self.table.setdefault(key, np.zeros(n_items + 1))[item] = p

    def context(self, user, history=None):
        key = str(user) if self.user_context is None else self.user_context.get(user, str(user))
        return key

    def vector(self, key):
        v = self.table.get(str(key))
        return np.zeros(self.n_items + 1) if v is None else v


def write_eta_table(path, table: dict, min_prob: float = 0.0) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(table, key=str):
            vec = np.asarray(table[key])
            for item in range(1, vec.size):
                if vec[item] > min_prob:
                    fh.write(f"{key}\t{item}\t{vec[item]:.17g}\n")


def eta_empirical(sequences, n_items: int, smoothing: float = 1.0) -> EmpiricalEta:
    return EmpiricalEta(n_items, smoothing).fit(sequences)


class SubtreeMaxCache:
    """Per-context winner tables (eta rank and best rank under each node) for one tree."""

    def __init__(self, tree: TreeIndex, source: EtaSource):
        self.tree = tree
        self.source = source
        self._tables: dict = {}

    def table(self, user, history):
        key = self.source.context(user, history)
        tab = self._tables.get(key)
        if tab is None:
            tab = subtree_winner_ranks(self.tree, self.source.vector(key))
            self._tables[key] = tab
        return tab

    def rectified(self, user, history, item: int) -> np.ndarray:
        rank, best = self.table(user, history)
        path = self.tree.path_indices(item)
        r = rank[item]
        return np.array([r == best[j][path[j]] for j in range(self.tree.height + 1)], dtype=float)


def is_subtree_max(tree: TreeIndex, eta, item: int, node: NodeId) -> bool:
    """True iff ``item`` sits under ``node`` and is its smallest-id eta maximiser."""
    if item not in set(int(x) for x in tree.items_under(node)):
        return False
    rank, best = subtree_winner_ranks(tree, eta)
    return bool(rank[item] == best[node.level][node.index - 1])
