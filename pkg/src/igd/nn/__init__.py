"""Trainable denoiser network (PyTorch)."""

from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from .losses import batch_loss, loss_bce, loss_mse_eps, loss_xary_ce
from .model import DiscoDit, DiscoDitConfig, NonFiniteError, build_model, cond_flags, time_features
from .train import (
    NetworkDenoiser,
    TrainerConfig,
    TrainingDiverged,
    TrainResult,
    backward,
    ema_update,
    load_model,
    lr_at,
    train,
)
