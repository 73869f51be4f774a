"""Pre-training: loss, optimizer, schedule, checkpoints and the linear probe."""

from ropim.pretrain.checkpoint import Checkpoint
from ropim.pretrain.config import TrainConfig
from ropim.pretrain.loss import Reduction, predict, ropim_loss
from ropim.pretrain.optim import OptimizerState, adamw_step, lr_at
from ropim.pretrain.probe import ProbeResult, linear_probe
from ropim.pretrain.train import TrainResult, init_model, pretrain, read_loss_log, sample_spec

__all__ = [
    "Checkpoint", "OptimizerState", "ProbeResult", "Reduction", "TrainConfig", "TrainResult",
    "adamw_step", "init_model", "linear_probe", "lr_at", "predict", "pretrain",
    "read_loss_log", "ropim_loss", "sample_spec",
]
