"""Tree-indexed deep retrieval: tree index, scorers, sampled layer-wise training,
beam-search retrieval and tree re-learning."""

from .beam import retrieve_topk
from .estimator import DeepTreeRetriever
from .scorer import DINScorer, DotScorer, TableScorer
from .trainer import TrainConfig, alternate, train_epoch
from .tree import NodeId, TreeIndex
from .tree_update import update_tree

__all__ = [
    "DINScorer", "DeepTreeRetriever", "DotScorer", "NodeId", "TableScorer", "TrainConfig",
    "TreeIndex", "alternate", "retrieve_topk", "train_epoch", "update_tree",
]
