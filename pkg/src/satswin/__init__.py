"""satswin: hierarchical spatio-temporal masked autoencoding for satellite
time-series cubes, with a skip-connected UNet-style finetuning network.
"""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (ArchOptions, ConfigError, HeadConfig, ModelConfig,
                     ensure_valid, swin_base_config, tiny_config, validate_config)
from .estimators import SwinMAE, SwinUNetRegressor, SwinUNetSegmenter, infer_config
from .masking import MaskSpec, apply_mask, generate_window_mask
from .metrics import ConfusionMatrix, regression_metrics
from .model import MaskedAutoencoder, SwinUNet, TransferReport, transfer_weights
from .shapes import shape_pipeline
from .training import (LoopConfig, OptimState, ScheduleConfig, adamw_step, finetune,
                       lr_at, mae_loss, pretrain)

__all__ = [
    "ArchOptions", "Checkpoint", "ConfigError", "ConfusionMatrix", "HeadConfig",
    "LoopConfig", "MaskSpec", "MaskedAutoencoder", "ModelConfig", "OptimState",
    "ScheduleConfig", "SwinMAE", "SwinUNet", "SwinUNetRegressor", "SwinUNetSegmenter",
    "TransferReport", "adamw_step", "apply_mask", "ensure_valid", "finetune",
    "generate_window_mask", "infer_config", "load_checkpoint", "lr_at", "mae_loss",
    "pretrain", "regression_metrics", "save_checkpoint", "shape_pipeline",
    "swin_base_config", "tiny_config", "transfer_weights", "validate_config",
]
