from .checkpoint import (
    BadMagicError,
    Checkpoint,
    CheckpointError,
    CheckpointShapeError,
    TruncatedCheckpointError,
    VersionMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from .models import (
    CeConfig,
    CeParams,
    DiscConfig,
    DiscParams,
    FeatureNetConfig,
    FeatureNetParams,
    Params,
    ce_forward,
    disc_forward,
    featnet_forward,
    init_params,
    params_from_arrays,
    tap_stride,
    zero_params,
)

__all__ = [
    "BadMagicError", "CeConfig", "CeParams", "Checkpoint", "CheckpointError", "CheckpointShapeError",
    "DiscConfig", "DiscParams", "FeatureNetConfig", "FeatureNetParams", "Params",
    "TruncatedCheckpointError", "VersionMismatchError", "ce_forward", "disc_forward",
    "featnet_forward", "init_params", "load_checkpoint", "params_from_arrays", "save_checkpoint",
    "tap_stride", "zero_params",
]
