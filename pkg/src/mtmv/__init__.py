"""Multi-task multi-view graph convolutional learning engine.

Submodules:
  autodiff  reverse-mode AD over dense tensors and constant sparse matrices
  graph     multi-view graph model, normalization, structural diagnostics
  model     shared-weight multi-view GCN, attention fusion, task heads, losses
  training  splits, Adam, the epoch loop, ablation sweeps
  metrics   ranking and classification metrics
  data      canonical dataset format and the correlated SBM generator
  cli       the `mtmv` command-line entry point
"""

__version__ = "0.1.0"

from .autodiff import SparseMatrix, Tensor
from .data import SyntheticConfig, generate, load, save
from .graph import MultiViewGraph, jaccard_agreement, normalize, task_correlation, union_edges
from .metrics import MetricsReport, average_precision, classification_metrics, link_metrics, roc_auc
from .model import ModelConfig, ModelParameters, TaskSpec
from .training import Adam, SplitPlan, TrainConfig, run_ablation, split, train

__all__ = [
    "Adam", "MetricsReport", "ModelConfig", "ModelParameters", "MultiViewGraph",
    "SparseMatrix", "SplitPlan", "SyntheticConfig", "TaskSpec", "Tensor",
    "TrainConfig", "average_precision", "classification_metrics", "generate",
    "jaccard_agreement", "link_metrics", "load", "normalize", "roc_auc",
    "run_ablation", "save", "split", "task_correlation", "train", "union_edges",
]
