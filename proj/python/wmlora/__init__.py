"""Watermark LoRA toy system: detection statistics, scaling-matrix algebra and experiment runners."""

from ._wmlora import (
    ConfigError,
    Error,
    IoError,
    MergeError,
    PayloadError,
    SecretMessage,
    ShapeError,
    TrainingError,
    bit_accuracy,
    checkpoint_metadata,
    collusion_table,
    config_hash,
    default_config,
    fpr,
    fpr_incomplete_beta,
    init_mapper,
    lora_delta,
    prvl_loss,
    regularized_incomplete_beta,
    run_experiment,
    scaling_diagonals,
    threshold_for_fpr,
    tpr,
)

__all__ = [name for name in dir() if not name.startswith("_")]
