"""Neural factor-graph model, permutation-minimal loss, training and evaluation."""

from .loss import PermutationPolicy, permutation_min_loss
from .metrics import MetricsRecord, edge_metrics
from .model import GraphBatch, ModelConfig, ModelParams, backward, forward, init_states, make_batch, tensors_for
from .train import TrainConfig, evaluate, load_checkpoint, new_model, predict, save_checkpoint, train

__all__ = [
    "GraphBatch", "MetricsRecord", "ModelConfig", "ModelParams", "PermutationPolicy", "TrainConfig",
    "backward", "edge_metrics", "evaluate", "forward", "init_states", "load_checkpoint",
    "make_batch", "new_model", "predict", "permutation_min_loss", "save_checkpoint", "tensors_for", "train",
]
