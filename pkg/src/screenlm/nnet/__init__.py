from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_into, save_checkpoint
from .core import finite_difference_check, positions_2d
from .ptp import (
    PTP_CONFIGS,
    PTPBatch,
    PTPConfig,
    PTPModel,
    PTPOutput,
    StackConfig,
    collate,
    config_by_name,
    ptp_loss,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "PTP_CONFIGS",
    "PTPBatch",
    "PTPConfig",
    "PTPModel",
    "PTPOutput",
    "StackConfig",
    "collate",
    "config_by_name",
    "finite_difference_check",
    "load_checkpoint",
    "load_into",
    "positions_2d",
    "ptp_loss",
    "save_checkpoint",
]
