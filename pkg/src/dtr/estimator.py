"""scikit-learn style wrapper around tree construction, alternating training and retrieval."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .beam import retrieve_topk
from .data import TrainInstance
from .scorer import DEFAULT_WINDOWS
from .trainer import TrainConfig, alternate
from .tree import TreeIndex


class DeepTreeRetriever(BaseEstimator):
    """Tree-indexed top-k retriever.

    ``X`` is an integer matrix of left-padded histories (0 = padding, most
    recent last); ``y`` holds the target item ids. ``predict`` returns the
    ``n_results`` best items per row via beam search.

    Parameters mirror ``TrainConfig``; ``eta`` is an optional ``EtaSource``
    used for rectification (an empirical one is fitted otherwise).
    """

    def __init__(self, branching=2, scorer="din", embed_dim=24, window_sizes=DEFAULT_WINDOWS,
                 hidden=(128, 64), sampler="tree", rectify=True, eta=None, n_negatives=70,
                 learning_rate=1e-3, batch_size=100, epochs=1, alternations=12,
                 update_stride=7, beam_size=150, n_results=20, random_state=0):
        self.branching = branching
        self.scorer = scorer
        self.embed_dim = embed_dim
        self.window_sizes = window_sizes
        self.hidden = hidden
        self.sampler = sampler
        self.rectify = rectify
        self.eta = eta
        self.n_negatives = n_negatives
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.alternations = alternations
        self.update_stride = update_stride
        self.beam_size = beam_size
        self.n_results = n_results
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            negatives=self.n_negatives, sampler=self.sampler, rectify=self.rectify,
            learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            alternations=self.alternations, seed=self.random_state, scorer=self.scorer,
            beam_size=self.beam_size, embed_dim=self.embed_dim,
            window_sizes=tuple(self.window_sizes), hidden=tuple(self.hidden),
            update_stride=self.update_stride, branching=self.branching,
        )

    def _check_X(self, X):
        X = check_array(X, dtype=np.int64, ensure_min_samples=1)
        if np.any(X < 0):
            raise ValueError("histories must hold non-negative item ids")
        return X

    def fit(self, X, y, items=None, users=None, tree=None):
        """Train on (history, target) rows. ``items`` defaults to every id seen in X and y."""
        config = self._config()
        X = self._check_X(X)
        y = np.asarray(y, dtype=np.int64).ravel()
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if np.any(y <= 0):
            raise ValueError("targets must be positive item ids")
        if items is None:
            items = np.union1d(np.unique(X[X > 0]), y)
        items = np.asarray(items, dtype=np.int64)
        users = np.arange(X.shape[0]) if users is None else np.asarray(users)
        if tree is None:
            tree = TreeIndex.random(items, config.branching, seed=config.seed)
        instances = [TrainInstance(int(u), h, int(t)) for u, h, t in zip(users, X, y)]
        res = alternate(config, tree, instances, eta=self.eta, n_items=int(items.max()))
        self.tree_, self.scorer_ = res.tree, res.scorer
        self.loss_curve_ = res.losses
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """(n_rows, n_results) item ids, best first."""
        check_is_fitted(self, "tree_")
        X = self._check_X(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected histories of length {self.n_features_in_}, got {X.shape[1]}")
        k = min(self.n_results, self.tree_.n_items)
        return np.stack([retrieve_topk(self.tree_, self.scorer_, h, self.beam_size, k)[0] for h in X])

    def score(self, X, y):
        """Mean hit rate of the targets in the predicted lists."""
        pred = self.predict(X)
        y = np.asarray(y).ravel()
        return float(np.mean([t in row for row, t in zip(pred, y)]))
