"""Interaction logs, user splits, fixed-length training instances and synthetic data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

MIN_INTERACTIONS = 15
SEQ_LEN = 70          # history + target
HISTORY_LEN = SEQ_LEN - 1


class DataFormatError(ValueError):
    pass


@dataclass
class InteractionLog:
    """Per-user item sequences in timestamp order, items re-indexed densely to 1..n_items."""

    sequences: dict[int, np.ndarray]
    item_ids: np.ndarray                      # dense index - 1 -> raw item id
    n_filtered: int = 0

    @property
    def n_items(self) -> int:
        return int(self.item_ids.size)

    @property
    def users(self) -> list[int]:
        return sorted(self.sequences)


@dataclass(frozen=True)
class TrainInstance:
    user: int
    history: np.ndarray     # length HISTORY_LEN, left-padded with 0, most recent last
    target: int


@dataclass
class EvalUser:
    user: int
    history: np.ndarray
    labels: frozenset


@dataclass
class Split:
    train: list[TrainInstance]
    validation: list[EvalUser]
    test: list[EvalUser]
    train_sequences: dict[int, np.ndarray] = field(default_factory=dict)


def read_rows(path):
    """Yields ``(user, item, timestamp)`` from a 3-column TSV, raising with the line number."""
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or (lineno == 1 and row[0] == "user_id"):
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(row)}")
            try:
                yield int(row[0]), int(row[1]), float(row[2])
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric field in {row!r}") from None


def build_log(rows, min_interactions: int = MIN_INTERACTIONS) -> InteractionLog:
    per_user: dict[int, list[tuple[float, int, int]]] = {}
    for k, (user, item, ts) in enumerate(rows):
        per_user.setdefault(user, []).append((ts, k, item))
    kept = {u: ev for u, ev in per_user.items() if len(ev) >= min_interactions}
    raw_items = np.unique([it for ev in kept.values() for _, _, it in ev]).astype(np.int64)
    dense = {int(r): i + 1 for i, r in enumerate(raw_items)}
    seqs = {u: np.array([dense[it] for _, _, it in sorted(ev)], dtype=np.int64)
            for u, ev in kept.items()}
    return InteractionLog(seqs, raw_items, len(per_user) - len(kept))


def ingest(path, min_interactions: int = MIN_INTERACTIONS) -> InteractionLog:
    """Parse a ``user<TAB>item<TAB>timestamp`` log and drop users with too few interactions."""
    return build_log(read_rows(path), min_interactions)


def pad_history(items, length: int = HISTORY_LEN) -> np.ndarray:
    items = np.asarray(items, dtype=np.int64)[-length:] if length else np.zeros(0, np.int64)
    out = np.zeros(length, dtype=np.int64)
    if items.size:
        out[length - items.size:] = items
    return out


def train_instance(user, seq, history_len: int = HISTORY_LEN) -> TrainInstance:
    seq = np.asarray(seq)[-(history_len + 1):]
    return TrainInstance(user, pad_history(seq[:-1], history_len), int(seq[-1]))


def eval_user(user, seq, history_len: int = HISTORY_LEN) -> EvalUser:
    half = len(seq) // 2
    return EvalUser(user, pad_history(seq[:half], history_len), frozenset(int(x) for x in seq[half:]))


def split_users(log: InteractionLog, seed: int = 0, history_len: int = HISTORY_LEN,
                fraction: float = 0.1) -> Split:
    """Seeded user-level split: ``fraction`` validation, ``fraction`` test, rest train."""
    users = np.array(log.users)
    if users.size < 10:
        raise ValueError("need at least 10 users to split")
    users = users[np.random.default_rng(seed).permutation(users.size)]
    n_eval = int(users.size * fraction)
    val, test, train = users[:n_eval], users[n_eval:2 * n_eval], users[2 * n_eval:]
    seqs = log.sequences
    return Split(
        train=[train_instance(int(u), seqs[u], history_len) for u in sorted(train)],
        validation=[eval_user(int(u), seqs[u], history_len) for u in sorted(val)],
        test=[eval_user(int(u), seqs[u], history_len) for u in sorted(test)],
        train_sequences={int(u): seqs[u] for u in sorted(train)},
    )


@dataclass
class SyntheticData:
    log: InteractionLog
    eta: dict[str, np.ndarray]        # cluster key -> eta over dense items (index 0 unused)
    user_cluster: dict[int, str]
    rows: list[tuple[int, int, int]]


def synth_generate(n_users: int, n_items: int, concentration: float = 0.1, seed: int = 0,
                   n_clusters: int = 10, min_len: int = MIN_INTERACTIONS,
                   max_len: int = SEQ_LEN) -> SyntheticData:
    """Users in ``n_clusters`` groups, each with a Dirichlet(concentration) item distribution;
    every user draws a random number of i.i.d. interactions from its group's distribution."""
    if n_users < 1 or n_items < 1:
        raise ValueError("sizes must be >= 1")
    rng = np.random.default_rng(seed)
    eta = {}
    for c in range(n_clusters):
        v = np.zeros(n_items + 1)
        v[1:] = rng.dirichlet(np.full(n_items, concentration))
        # extreme concentrations can underflow to exact zeros; keep it a distribution
        v[1:] = v[1:] / v[1:].sum() if v[1:].sum() > 0 else 1.0 / n_items
        eta[f"c{c}"] = v
    cluster = rng.integers(0, n_clusters, size=n_users)
    lengths = rng.integers(min_len, max_len + 1, size=n_users)
    rows, seqs = [], {}
    for u in range(1, n_users + 1):
        v = eta[f"c{cluster[u - 1]}"]
        items = rng.choice(np.arange(1, n_items + 1), size=lengths[u - 1], p=v[1:])
        seqs[u] = items.astype(np.int64)
        rows.extend((u, int(it), t) for t, it in enumerate(items))
    log = InteractionLog(seqs, np.arange(1, n_items + 1, dtype=np.int64))
    return SyntheticData(log, eta, {u: f"c{cluster[u - 1]}" for u in range(1, n_users + 1)}, rows)


def write_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, it, ts in rows:
            fh.write(f"{u}\t{it}\t{ts}\n")
