"""B-ary tree index with a leaf <-> item bijection.

Nodes are addressed publicly as ``NodeId(level, index)`` with a 1-based
``index`` inside each level. Internally every level is a contiguous numpy
array; children of a node and leaves under a node are contiguous ranges of
the next level / leaf level, which is what makes the vectorised samplers and
the subtree-max tables cheap.
"""

from __future__ import annotations

import io
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class TreeFormatError(ValueError):
    """Raised when a serialized tree cannot be parsed."""


class NodeId(NamedTuple):
    level: int
    index: int  # 1-based within the level


def tree_height(n_items: int, branching: int) -> int:
    """Smallest H with branching**H >= n_items (integer arithmetic only)."""
    if n_items < 1:
        raise ValueError("need at least one item")
    if branching < 2:
        raise ValueError("branching factor must be >= 2")
    h, cap = 0, 1
    while cap < n_items:
        cap *= branching
        h += 1
    return h


def _split_sizes(n: int, parts: int) -> list[int]:
    # near-equal, earlier parts take the remainder, empty parts dropped
    base, extra = divmod(n, parts)
    sizes = [base + (1 if i < extra else 0) for i in range(parts)]
    return [s for s in sizes if s > 0]


class TreeIndex:
    """Immutable B-ary tree whose leaves all sit at level ``height``.

    The shape depends only on ``(n_leaves, branching)``: the ordered item list
    is split recursively into ``branching`` near-equal parts and leaves that end
    up shallow are pushed down through single-child chain nodes.
    """

    def __init__(self, leaf_items: Sequence[int], branching: int = 2):
        leaf_items = np.asarray(leaf_items, dtype=np.int64)
        if leaf_items.ndim != 1 or leaf_items.size == 0:
            raise ValueError("tree needs a non-empty 1-D sequence of items")
        if branching < 2:
            raise ValueError("branching factor must be >= 2")
        if np.unique(leaf_items).size != leaf_items.size:
            raise ValueError("duplicate item ids in leaf order")

        self.branching = int(branching)
        self.height = tree_height(leaf_items.size, self.branching)
        self.leaf_items = leaf_items
        self.leaf_items.setflags(write=False)
        self._item_to_leaf = {int(it): i for i, it in enumerate(leaf_items)}
        self._build_levels()

    def _build_levels(self) -> None:
        H, B = self.height, self.branching
        # every node is a (lo, hi) half-open span over leaf positions
        spans = [[(0, self.leaf_items.size)]]
        parents = [np.zeros(0, dtype=np.int64)]
        for _ in range(H):
            nxt, par = [], []
            for p, (lo, hi) in enumerate(spans[-1]):
                if hi - lo == 1:
                    nxt.append((lo, hi))  # chain-deepening
                    par.append(p)
                    continue
                start = lo
                for size in _split_sizes(hi - lo, B):
                    nxt.append((start, start + size))
                    par.append(p)
                    start += size
            spans.append(nxt)
            parents.append(np.asarray(par, dtype=np.int64))

        self.level_sizes = np.array([len(s) for s in spans], dtype=np.int64)
        self.level_offsets = np.concatenate([[0], np.cumsum(self.level_sizes)])
        self.n_nodes = int(self.level_offsets[-1])
        self.parents = parents
        self.leaf_lo = [np.array([s[0] for s in lvl], dtype=np.int64) for lvl in spans]
        self.leaf_hi = [np.array([s[1] for s in lvl], dtype=np.int64) for lvl in spans]
        # child_ptr[j][i]:child_ptr[j][i+1] are the 0-based children of node i at level j
        self.child_ptr = []
        for j in range(H):
            counts = np.bincount(parents[j + 1], minlength=self.level_sizes[j])
            self.child_ptr.append(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))
        self.child_ptr.append(np.zeros(self.level_sizes[H] + 1, dtype=np.int64))

        if self.level_sizes[H] != self.leaf_items.size or self.level_sizes[0] != 1:
            raise AssertionError("tree construction produced an unbalanced level")
        if np.any(self.leaf_hi[H] - self.leaf_lo[H] != 1):
            raise AssertionError("leaf level contains non-singleton spans")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_categories(cls, items: Iterable[tuple[int, int]], branching: int = 2,
                        seed: int = 0) -> "TreeIndex":
        """Group items by category (categories in shuffled order) and split recursively."""
        items = list(items)
        if not items:
            raise ValueError("empty item set")
        if branching < 2:
            raise ValueError("branching factor must be >= 2")
        groups: dict[int, list[int]] = {}
        for item, cat in items:
            groups.setdefault(cat, []).append(item)
        cats = sorted(groups)
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(cats))
        leaf_order = [it for c in order for it in groups[cats[c]]]
        return cls(leaf_order, branching)

    @classmethod
    def random(cls, items: Sequence[int], branching: int = 2, seed: int = 0) -> "TreeIndex":
        items = np.asarray(items, dtype=np.int64)
        if items.size == 0:
            raise ValueError("empty item set")
        rng = np.random.default_rng(seed)
        return cls.from_categories(((int(i), 0) for i in rng.permutation(items)), branching, seed)

    def with_leaf_items(self, leaf_items: Sequence[int]) -> "TreeIndex":
        """Same shape, new item mapping."""
        if len(leaf_items) != self.leaf_items.size:
            raise ValueError("leaf count changed")
        return TreeIndex(leaf_items, self.branching)

    # -- navigation -------------------------------------------------------

    @property
    def n_items(self) -> int:
        return int(self.leaf_items.size)

    @property
    def items(self) -> np.ndarray:
        return self.leaf_items

    def _check(self, node: NodeId) -> None:
        if not (0 <= node.level <= self.height):
            raise IndexError(f"level {node.level} outside [0, {self.height}]")
        if not (1 <= node.index <= self.level_sizes[node.level]):
            raise IndexError(f"index {node.index} outside level {node.level}")

    def gid(self, level: int, index0) -> np.ndarray | int:
        """Global 0-based node id(s) from a level and 0-based in-level index."""
        return self.level_offsets[level] + index0

    def node_gid(self, node: NodeId) -> int:
        self._check(node)
        return int(self.level_offsets[node.level] + node.index - 1)

    def parent_of(self, node: NodeId) -> NodeId | None:
        self._check(node)
        if node.level == 0:
            return None
        return NodeId(node.level - 1, int(self.parents[node.level][node.index - 1]) + 1)

    def children_of(self, node: NodeId) -> list[NodeId]:
        self._check(node)
        if node.level == self.height:
            return []
        ptr = self.child_ptr[node.level]
        return [NodeId(node.level + 1, i + 1) for i in range(ptr[node.index - 1], ptr[node.index])]

    def ancestor_of(self, node: NodeId, level: int) -> NodeId:
        self._check(node)
        if not (0 <= level <= node.level):
            raise IndexError(f"ancestor level {level} outside [0, {node.level}]")
        i = node.index - 1
        for j in range(node.level, level, -1):
            i = int(self.parents[j][i])
        return NodeId(level, i + 1)

    def leaves_under(self, node: NodeId) -> list[NodeId]:
        self._check(node)
        lo = self.leaf_lo[node.level][node.index - 1]
        hi = self.leaf_hi[node.level][node.index - 1]
        return [NodeId(self.height, i + 1) for i in range(lo, hi)]

    def items_under(self, node: NodeId) -> np.ndarray:
        self._check(node)
        lo = self.leaf_lo[node.level][node.index - 1]
        hi = self.leaf_hi[node.level][node.index - 1]
        return self.leaf_items[lo:hi]

    def leaf_of_item(self, item: int) -> NodeId:
        try:
            return NodeId(self.height, self._item_to_leaf[int(item)] + 1)
        except KeyError:
            raise KeyError(f"item {item} is not in the tree") from None

    def item_of_leaf(self, node: NodeId) -> int:
        self._check(node)
        if node.level != self.height:
            raise ValueError("not a leaf")
        return int(self.leaf_items[node.index - 1])

    def item_path(self, item: int) -> tuple[int, ...]:
        """1-based index of the item's ancestor at every level 0..H."""
        return tuple(int(i) + 1 for i in self.path_indices(item))

    def path_indices(self, item: int) -> np.ndarray:
        """0-based ancestor indices at every level 0..H (internal use)."""
        leaf = self._item_to_leaf.get(int(item))
        if leaf is None:
            raise KeyError(f"item {item} is not in the tree")
        out = np.empty(self.height + 1, dtype=np.int64)
        i = leaf
        for j in range(self.height, -1, -1):
            out[j] = i
            if j:
                i = self.parents[j][i]
        return out

    # -- equality / serialization ----------------------------------------

    def __eq__(self, other) -> bool:
        if not isinstance(other, TreeIndex):
            return NotImplemented
        return (self.branching == other.branching
                and np.array_equal(self.leaf_items, other.leaf_items))

    def __repr__(self) -> str:
        return (f"TreeIndex(n_items={self.n_items}, branching={self.branching}, "
                f"height={self.height})")

    def dumps(self) -> str:
        lines = [f"TREE v1 {self.branching} {self.height} {self.n_items}"]
        lines += [f"LEAF {i + 1} {it}" for i, it in enumerate(self.leaf_items)]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "TreeIndex":
        lines = io.StringIO(text).read().splitlines()
        if not lines:
            raise TreeFormatError("line 1: empty stream, expected header")
        head = lines[0].split()
        if len(head) != 5 or head[0] != "TREE" or head[1] != "v1":
            raise TreeFormatError(f"line 1: bad header {lines[0]!r}")
        try:
            B, H, n = (int(x) for x in head[2:])
        except ValueError:
            raise TreeFormatError(f"line 1: non-integer header field in {lines[0]!r}") from None
        if n < 1 or B < 2:
            raise TreeFormatError(f"line 1: invalid B={B} or NLEAF={n}")
        body = [ln for ln in lines[1:] if ln.strip()]
        if len(body) != n:
            raise TreeFormatError(
                f"line {len(lines) + 1}: expected {n} LEAF lines, found {len(body)} (truncated?)")
        items = np.empty(n, dtype=np.int64)
        for lineno, ln in enumerate(lines[1:], start=2):
            if not ln.strip():
                continue
            parts = ln.split()
            if len(parts) != 3 or parts[0] != "LEAF":
                raise TreeFormatError(f"line {lineno}: expected 'LEAF <index> <item>', got {ln!r}")
            try:
                idx, item = int(parts[1]), int(parts[2])
            except ValueError:
                raise TreeFormatError(f"line {lineno}: non-integer field in {ln!r}") from None
            if not 1 <= idx <= n:
                raise TreeFormatError(f"line {lineno}: leaf index {idx} outside [1, {n}]")
            if idx != lineno - 1:
                raise TreeFormatError(f"line {lineno}: leaf index {idx} out of order")
            items[idx - 1] = item
        try:
            tree = cls(items, B)
        except ValueError as exc:
            raise TreeFormatError(f"invalid leaf set: {exc}") from None
        if tree.height != H:
            raise TreeFormatError(f"line 1: header height {H} != {tree.height} implied by NLEAF={n}")
        return tree

    @classmethod
    def load(cls, path) -> "TreeIndex":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())
