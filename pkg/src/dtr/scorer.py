"""Preference models M(u, n) -> score with hand-written reverse-mode gradients.

All scorers share one calling convention:

    scores, cache = scorer.forward(history, nodes)
    grads = scorer.backward(cache, dscores, grads)

``history`` is a 1-D array of dense item ids (0 = padding, most recent last) and
``nodes`` a 1-D array of global node ids (see ``TreeIndex.gid``). ``grads`` is a
dict with one array per entry of ``scorer.params`` and is accumulated into.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

DEFAULT_WINDOWS = (20, 20, 10, 10, 2, 2, 2, 1, 1, 1)
PRELU_INIT = 0.25
INIT_SCALE = 0.05


def prelu(x, slope):
    return np.where(x > 0, x, slope * x)


def _prelu_grads(x, slope, dy):
    """Returns (dx, dslope) for y = prelu(x, slope)."""
    neg = x <= 0
    dx = np.where(neg, slope * dy, dy)
    dslope = float(np.sum(np.where(neg, x * dy, 0.0)))
    return dx, dslope


class BaseScorer:
    params: dict[str, np.ndarray]

    def score(self, history, nodes) -> np.ndarray:
        return self.forward(history, nodes)[0]

    def batch_score(self, history, nodes) -> np.ndarray:
        return self.score(history, nodes)

    def score_many(self, histories, nodes) -> np.ndarray:
        """(n_histories, n_nodes) score matrix."""
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(histories) == 0:
            return np.zeros((0, nodes.size))
        return np.stack([self.score(h, nodes) for h in histories])

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new


class DotScorer(BaseScorer):
    """Mean of the non-padding history embeddings dotted with the node embedding."""

    kind = "dot"

    def __init__(self, n_items: int, n_nodes: int, dim: int = 24, random_state=None):
        rng = np.random.default_rng(random_state)
        item = rng.uniform(-INIT_SCALE, INIT_SCALE, (n_items + 1, dim))
        item[0] = 0.0
        self.params = {
            "item_emb": item,
            "node_emb": rng.uniform(-INIT_SCALE, INIT_SCALE, (n_nodes, dim)),
        }

    def user_vector(self, history):
        history = np.asarray(history, dtype=np.int64)
        real = history[history > 0]
        if real.size == 0:
            return real, np.zeros(self.params["item_emb"].shape[1])
        return real, self.params["item_emb"][real].mean(axis=0)

    def forward(self, history, nodes):
        nodes = np.asarray(nodes, dtype=np.int64)
        real, u = self.user_vector(history)
        w = self.params["node_emb"][nodes]
        return w @ u, (real, u, nodes, w)

    def score_many(self, histories, nodes):
        H = np.asarray(histories, dtype=np.int64).reshape(len(histories), -1)
        mask = H > 0
        E = self.params["item_emb"][H] * mask[..., None]
        U = E.sum(axis=1) / np.maximum(mask.sum(axis=1), 1)[:, None]
        return U @ self.params["node_emb"][np.asarray(nodes, dtype=np.int64)].T

    def backward(self, cache, dscores, grads=None):
        real, u, nodes, w = cache
        grads = self.zero_grads() if grads is None else grads
        dscores = np.asarray(dscores, dtype=float)
        np.add.at(grads["node_emb"], nodes, dscores[:, None] * u[None, :])
        if real.size:
            du = dscores @ w
            np.add.at(grads["item_emb"], real, du / real.size)
        return grads


class DINScorer(BaseScorer):
    """Attention-over-windows scorer followed by a PReLU MLP with a scalar head.

    No bias terms anywhere, so an all-zero input maps to a zero score.
    """

    kind = "din"

    def __init__(self, n_items: int, n_nodes: int, dim: int = 24,
                 window_sizes: Sequence[int] = DEFAULT_WINDOWS,
                 attention_hidden: int = 36, hidden: Sequence[int] = (128, 64),
                 random_state=None):
        rng = np.random.default_rng(random_state)
        u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, shape)  # noqa: E731
        item = u(n_items + 1, dim)
        item[0] = 0.0
        window_sizes = [int(w) for w in window_sizes]
        if any(w <= 0 for w in window_sizes):
            raise ValueError("window sizes must be positive")
        self.params = {
            "item_emb": item,
            "node_emb": u(n_nodes, dim),
            "att_w1": u(attention_hidden, 3 * dim),
            "att_w2": u(1, attention_hidden),
            "att_a1": np.array([PRELU_INIT]),
            "att_a2": np.array([PRELU_INIT]),
        }
        sizes = [(len(window_sizes) + 1) * dim, *hidden]
        for i in range(len(hidden)):
            self.params[f"mlp_w{i}"] = u(sizes[i + 1], sizes[i])
            self.params[f"mlp_a{i}"] = np.array([PRELU_INIT])
        self.params["mlp_out"] = u(1, sizes[-1])
        self._set_windows(window_sizes)

    def _set_windows(self, window_sizes):
        self.window_sizes = tuple(window_sizes)
        self.history_length = int(sum(window_sizes))
        self.window_of = np.repeat(np.arange(len(window_sizes)), window_sizes)

    @property
    def n_hidden(self) -> int:
        return sum(1 for k in self.params if k.startswith("mlp_w"))

    @property
    def dim(self) -> int:
        return self.params["item_emb"].shape[1]

    def _history(self, history):
        history = np.asarray(history, dtype=np.int64)
        if history.shape != (self.history_length,):
            raise ValueError(f"history must have length {self.history_length}, got {history.shape}")
        pos = np.flatnonzero(history > 0)
        return history[pos], self.window_of[pos]

    def attention_weights(self, history, nodes):
        """(n_nodes, n_real_positions) attention weights plus the forward cache."""
        real, win = self._history(history)
        p = self.params
        A = p["item_emb"][real]                      # (P, d)
        Wn = p["node_emb"][np.asarray(nodes, dtype=np.int64)]  # (N, d)
        N, P, d = Wn.shape[0], A.shape[0], A.shape[1]
        X = np.concatenate([
            np.broadcast_to(A[None], (N, P, d)),
            A[None] * Wn[:, None],
            np.broadcast_to(Wn[:, None], (N, P, d)),
        ], axis=2)
        h1_pre = X @ p["att_w1"].T
        h1 = prelu(h1_pre, p["att_a1"][0])
        s = (h1 @ p["att_w2"].T)[..., 0]
        w = prelu(s, p["att_a2"][0])
        return w, (real, win, A, Wn, X, h1_pre, h1, s)

    def window_aggregate(self, history, nodes):
        """(n_nodes, K', d) aggregated window vectors; padded positions contribute nothing."""
        w, att = self.attention_weights(history, nodes)
        real, win, A = att[0], att[1], att[2]
        Z = np.zeros((w.shape[0], len(self.window_sizes), A.shape[1]))
        if real.size:
            onehot = np.zeros((real.size, len(self.window_sizes)))
            onehot[np.arange(real.size), win] = 1.0
            Z = np.einsum("np,pd,pt->ntd", w, A, onehot)
        return Z, (w, att, onehot if real.size else None)

    def forward(self, history, nodes):
        nodes = np.asarray(nodes, dtype=np.int64)
        Z, agg = self.window_aggregate(history, nodes)
        Wn = agg[1][3]
        x = np.concatenate([Z.reshape(Z.shape[0], -1), Wn], axis=1)
        acts, pres = [x], []
        for i in range(self.n_hidden):
            pre = acts[-1] @ self.params[f"mlp_w{i}"].T
            pres.append(pre)
            acts.append(prelu(pre, self.params[f"mlp_a{i}"][0]))
        out = (acts[-1] @ self.params["mlp_out"].T)[:, 0]
        return out, (nodes, Z, agg, acts, pres)

    def backward(self, cache, dscores, grads=None):
        nodes, Z, (w, att, onehot), acts, pres = cache
        real, win, A, Wn, X, h1_pre, h1, s = att
        p = self.params
        g = self.zero_grads() if grads is None else grads
        dout = np.asarray(dscores, dtype=float)

        g["mlp_out"] += dout[None, :] @ acts[-1]
        dx = dout[:, None] * p["mlp_out"]
        for i in reversed(range(self.n_hidden)):
            dpre, da = _prelu_grads(pres[i], p[f"mlp_a{i}"][0], dx)
            g[f"mlp_a{i}"][0] += da
            g[f"mlp_w{i}"] += dpre.T @ acts[i]
            dx = dpre @ p[f"mlp_w{i}"]

        d = A.shape[1]
        dZ = dx[:, :-d].reshape(Z.shape)
        dWn = dx[:, -d:].copy()
        if real.size:
            dZp = dZ[:, win, :]                           # (N, P, d)
            dw = np.einsum("npd,pd->np", dZp, A)
            dA = np.einsum("np,npd->pd", w, dZp)
            ds, da2 = _prelu_grads(s, p["att_a2"][0], dw)
            g["att_a2"][0] += da2
            g["att_w2"] += np.einsum("np,nph->h", ds, h1)[None, :]
            dh1 = ds[..., None] * p["att_w2"][0]
            dh1_pre, da1 = _prelu_grads(h1_pre, p["att_a1"][0], dh1)
            g["att_a1"][0] += da1
            g["att_w1"] += np.einsum("nph,npk->hk", dh1_pre, X)
            dX = dh1_pre @ p["att_w1"]
            dA += dX[..., :d].sum(0) + np.einsum("npd,nd->pd", dX[..., d:2 * d], Wn)
            dWn += np.einsum("npd,pd->nd", dX[..., d:2 * d], A) + dX[..., 2 * d:].sum(1)
            np.add.at(g["item_emb"], real, dA)
        np.add.at(g["node_emb"], nodes, dWn)
        return g


def attention_weight(a, w_n, params) -> float:
    """Attention weight of one history embedding against one node embedding."""
    a, w_n = np.asarray(a, float), np.asarray(w_n, float)
    if a.shape != w_n.shape or params["att_w1"].shape[1] != 3 * a.size:
        raise ValueError("dimension mismatch between embeddings and attention weights")
    x = np.concatenate([a, a * w_n, w_n])
    h = prelu(params["att_w1"] @ x, params["att_a1"][0])
    return float(prelu(params["att_w2"] @ h, params["att_a2"][0])[0])


class TableScorer(BaseScorer):
    """User-independent fixed score per node; used for oracle constructions."""

    kind = "table"

    def __init__(self, node_scores):
        self.params = {"node_score": np.asarray(node_scores, dtype=float).copy()}

    def forward(self, history, nodes):
        nodes = np.asarray(nodes, dtype=np.int64)
        return self.params["node_score"][nodes], nodes

    def backward(self, cache, dscores, grads=None):
        grads = self.zero_grads() if grads is None else grads
        np.add.at(grads["node_score"], cache, dscores)
        return grads


# -- optimisers --------------------------------------------------------------

class Adam:
    """Dense Adam; re-zeroes the padding embedding after every step."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        _check_shapes(params, grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] -= lr * mhat / (np.sqrt(vhat) + self.eps)
        if "item_emb" in params:
            params["item_emb"][0] = 0.0
        return params


class SGD:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr

    def step(self, params, grads, lr=None):
        _check_shapes(params, grads)
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            params[k] -= lr * g
        if "item_emb" in params:
            params["item_emb"][0] = 0.0
        return params


def apply_gradients(params, grads, lr: float = 1e-3, optimizer=None):
    """One optimiser step (Adam unless ``optimizer`` is given); returns params."""
    optimizer = Adam(lr) if optimizer is None else optimizer
    return optimizer.step(params, grads, lr)


def _check_shapes(params, grads):
    for k, g in grads.items():
        if k not in params or params[k].shape != g.shape:
            raise ValueError(f"gradient block {k!r} does not match parameter shape")


# -- checkpoint format ---------------------------------------------------------

MAGIC = b"DTRPARAMS v1\n"


class CheckpointError(ValueError):
    pass


def save_params(scorer: BaseScorer, path) -> None:
    tensors = dict(scorer.params)
    if isinstance(scorer, DINScorer):
        tensors["meta.window_sizes"] = np.asarray(scorer.window_sizes, dtype=float)
    with open(path, "wb") as fh:
        fh.write(dump_tensors(tensors))


def dump_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def parse_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("offset 0: missing 'DTRPARAMS v1' header")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"offset {pos}: truncated, wanted {n} more bytes")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(float)
    if pos != len(blob):
        raise CheckpointError(f"offset {pos}: {len(blob) - pos} trailing bytes")
    return tensors


def load_params(path) -> BaseScorer:
    """Rebuild a scorer (kind inferred from tensor names) from a checkpoint file."""
    with open(path, "rb") as fh:
        tensors = parse_tensors(fh.read())
    return scorer_from_tensors(tensors)


def scorer_from_tensors(tensors) -> BaseScorer:
    tensors = dict(tensors)
    windows = tensors.pop("meta.window_sizes", None)
    if "att_w1" in tensors:
        scorer = object.__new__(DINScorer)
        scorer._set_windows([int(w) for w in windows])
    elif "node_score" in tensors:
        scorer = object.__new__(TableScorer)
    else:
        scorer = object.__new__(DotScorer)
    scorer.params = tensors
    return scorer
