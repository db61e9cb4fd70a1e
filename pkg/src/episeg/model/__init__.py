"""Optimiser, schedule, loss, mini segmenter, topology calculator and training loop."""

from .loss import softmax, weighted_ce_loss
from .mini import MiniSegmenter, mini_backward, mini_forward, predict_from_logits
from .optim import AdamState, OptimizerConfig, PlateauScheduler, adam_step, plateau_scheduler
from .topology import UNetTopology, unet_topology
from .train import TrainConfig, TrainingLog, load_checkpoint, save_checkpoint, train

__all__ = [
    "AdamState", "MiniSegmenter", "OptimizerConfig", "PlateauScheduler", "TrainConfig", "TrainingLog",
    "UNetTopology", "adam_step", "load_checkpoint", "mini_backward", "mini_forward", "plateau_scheduler",
    "predict_from_logits", "save_checkpoint", "softmax", "train", "unet_topology", "weighted_ce_loss",
]
