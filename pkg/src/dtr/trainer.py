"""Alternating optimisation: sampled layer-wise training, then tree update."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .eta import EmpiricalEta, EtaSource, SubtreeMaxCache
from .losses import full_softmax_grad, sampled_softmax_grad
from .metrics import MetricReport, evaluate_users
from .samplers import tree_sample_batch, uniform_sample_batch
from .scorer import DEFAULT_WINDOWS, Adam, DINScorer, DotScorer
from .tree import TreeIndex
from .tree_update import check_bijection, update_tree

log = logging.getLogger(__name__)

SAMPLERS = ("uniform", "tree", "full")
SCORERS = ("din", "dot")
VARIANTS = {("uniform", False): "DTR(U)", ("tree", False): "DTR(T)", ("tree", True): "DTR(T-RL)",
            ("uniform", True): "DTR(U-RL)", ("full", False): "full", ("full", True): "full-RL"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    negatives: int = 70
    sampler: str = "tree"
    rectify: bool = True
    learning_rate: float = 1e-3
    batch_size: int = 100
    epochs: int = 1
    alternations: int = 12
    seed: int = 0
    scorer: str = "din"
    beam_size: int = 150
    embed_dim: int = 24
    window_sizes: tuple = DEFAULT_WINDOWS
    hidden: tuple = (128, 64)
    update_stride: int = 7
    branching: int = 2
    eval_k: tuple = (20,)
    cap_negatives: bool = False   # use min(negatives, N_j - 1) negatives at level j

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}, got {self.scorer!r}")
        for name in ("negatives", "learning_rate", "batch_size", "epochs", "beam_size",
                     "embed_dim", "update_stride"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.alternations < 0:
            raise ValueError("alternations must be >= 0")
        if self.branching < 2:
            raise ValueError("branching must be >= 2")

    @property
    def variant(self) -> str:
        return VARIANTS[(self.sampler, bool(self.rectify))]

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def build_scorer(config: TrainConfig, n_items: int, n_nodes: int, seed=None):
    seed = config.seed if seed is None else seed
    if config.scorer == "dot":
        return DotScorer(n_items, n_nodes, config.embed_dim, random_state=seed)
    return DINScorer(n_items, n_nodes, config.embed_dim, config.window_sizes,
                     hidden=config.hidden, random_state=seed)


def level_negatives(config: TrainConfig, tree: TreeIndex) -> np.ndarray:
    m = np.full(tree.height + 1, config.negatives, dtype=np.int64)
    if config.cap_negatives:
        m = np.maximum(np.minimum(m, tree.level_sizes - 1), 1)
    return m


def _layer_nodes(tree: TreeIndex, config: TrainConfig, scorer, history, path, layers, rng):
    """Per trained layer: (level, 0-based node indices with the positive first, q or None)."""
    if config.sampler == "full":
        out = []
        for j in layers:
            n = int(tree.level_sizes[j])
            nodes = np.concatenate([[path[j]], np.delete(np.arange(n), path[j])])
            out.append((j, nodes, None))
        return out
    m = level_negatives(config, tree)
    if config.sampler == "tree":
        samples = tree_sample_batch(tree, scorer, history, path, m, rng)
    else:
        samples = uniform_sample_batch(tree, path, m, rng)
    by_level = {s.layer: s for s in samples}
    return [(j, np.concatenate([[path[j]], by_level[j].negatives - 1]), by_level[j].q)
            for j in layers]


def instance_step(tree: TreeIndex, config: TrainConfig, scorer, inst, rng, grads,
                  rect: SubtreeMaxCache | None = None) -> float:
    """Loss of one instance; its gradient is accumulated into ``grads``."""
    path = tree.path_indices(inst.target)
    if rect is not None:
        w = rect.rectified(inst.user, inst.history, inst.target)
    else:
        w = np.ones(tree.height + 1)
    layers = [j for j in range(1, tree.height + 1) if tree.level_sizes[j] >= 2 and w[j] > 0]
    if not layers:
        return 0.0
    parts = _layer_nodes(tree, config, scorer, inst.history, path, layers, rng)
    gids = np.concatenate([tree.gid(j, nodes) for j, nodes, _ in parts])
    scores, cache = scorer.forward(inst.history, gids)
    dscores = np.empty_like(scores)
    loss, off = 0.0, 0
    for j, nodes, q in parts:
        s = scores[off:off + nodes.size]
        if not np.all(np.isfinite(s)):
            raise TrainingDiverged(_dump(inst, j, s))
        if q is None:
            l, g = full_softmax_grad(s, 0, w[j])
        else:
            l, g = sampled_softmax_grad(s[0], s[1:], q, q.size, w[j])
        dscores[off:off + nodes.size] = g
        loss += l
        off += nodes.size
    if not np.isfinite(loss):
        raise TrainingDiverged(_dump(inst, None, scores))
    scorer.backward(cache, dscores, grads)
    return loss


def _dump(inst, layer, scores) -> str:
    s = np.asarray(scores)
    fin = s[np.isfinite(s)]
    rng_txt = f"[{fin.min():.4g}, {fin.max():.4g}]" if fin.size else "none"
    return (f"non-finite loss: user={inst.user} target={inst.target} layer={layer} "
            f"n_scores={s.size} n_nonfinite={int((~np.isfinite(s)).sum())} finite_range={rng_txt}")


def train_epoch(config: TrainConfig, tree: TreeIndex, scorer, instances, rng=None,
                optimizer=None, rect: SubtreeMaxCache | None = None) -> float:
    """One shuffled pass with an optimiser step per mini-batch; returns the mean instance loss."""
    rng = np.random.default_rng(rng)
    optimizer = Adam(config.learning_rate) if optimizer is None else optimizer
    instances = list(instances)
    if not instances:
        raise ValueError("empty training set")
    order = rng.permutation(len(instances))
    total = 0.0
    for b in range(0, len(order), config.batch_size):
        batch = order[b:b + config.batch_size]
        grads = scorer.zero_grads()
        for i in batch:
            total += instance_step(tree, config, scorer, instances[i], rng, grads, rect)
        for g in grads.values():
            g /= batch.size
        optimizer.step(scorer.params, grads)
    return total / len(instances)


@dataclass
class AlternationResult:
    tree: TreeIndex
    scorer: object
    metrics: list[MetricReport] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    trees: list[TreeIndex] = field(default_factory=list)
    updates: list[list] = field(default_factory=list)   # solved AssignmentProblems per round


def make_eta(config: TrainConfig, eta: EtaSource | None, train_sequences, n_items: int):
    if not config.rectify:
        return None
    if eta is not None:
        return eta
    return EmpiricalEta(n_items).fit(train_sequences.values() if isinstance(train_sequences, dict)
                                     else train_sequences)


def alternate(config: TrainConfig, tree: TreeIndex, instances, scorer=None, eta: EtaSource | None = None,
              eval_users=None, train_sequences=None, n_items: int | None = None,
              callback=None) -> AlternationResult:
    """``alternations`` rounds of (train ``epochs`` epochs, update the tree, evaluate).

    The metric history includes the evaluation before the first round. ``eta``
    defaults to an empirical estimate from ``train_sequences`` (or the training
    instances) when rectification is on.
    """
    instances = list(instances)
    n_items = int(tree.leaf_items.max()) if n_items is None else n_items
    scorer = build_scorer(config, n_items, tree.n_nodes) if scorer is None else scorer
    if train_sequences is None:
        train_sequences = [np.append(i.history, i.target) for i in instances]
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(config.learning_rate)
    res = AlternationResult(tree, scorer, trees=[tree])

    def run_eval():
        if eval_users is not None:
            rep = evaluate_users(res.tree, scorer, eval_users, config.beam_size, config.eval_k)
            res.metrics.append(rep)
            log.info("eval %s", " ".join(f"R@{k}={rep.recall[k]:.4f}" for k in rep.ks))

    run_eval()
    for a in range(config.alternations):
        # eta is refreshed once per alternation; the winner tables depend on the current tree
        source = make_eta(config, eta, train_sequences, n_items)
        rect = SubtreeMaxCache(res.tree, source) if source is not None else None
        for e in range(config.epochs):
            loss = train_epoch(config, res.tree, scorer, instances, rng, optimizer, rect)
            res.losses.append(loss)
            log.info("alternation %d epoch %d loss %.6f", a + 1, e + 1, loss)
        problems = []
        new = update_tree(res.tree, scorer, instances, config.update_stride, problems)
        check_bijection(res.tree, new)
        res.updates.append(problems)
        res.tree = new
        res.trees.append(new)
        run_eval()
        if callback is not None:
            callback(a, res)
    return res
