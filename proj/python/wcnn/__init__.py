"""Wavelet encoder-decoder networks for dense prediction.

Arrays are NCHW numpy arrays; float32 inputs stay float32, anything else is
computed in float64. Label maps are int32 arrays of shape (n, h, w).
"""

from ._wcnn import (
    ConfigError,
    ContractError,
    DataError,
    Error,
    ManifestError,
    Model,
    ModelConfig,
    ShapeError,
    UndefinedScoreError,
    Variant,
    config_keys,
    confusion_matrix,
    dwt2,
    dwt2_multi,
    evaluate,
    idwt2,
    idwt2_multi,
    iou_scores,
    parse_variant,
    resolve_config,
    synth_generate,
    train,
    variants,
    verify,
)

__version__ = "0.1.0"


def desk_config(variant="wcnn-ffc", num_classes=4, size=64):
    """ModelConfig for the small 1/8-width network used on generated data."""
    cfg = ModelConfig(variant, width_mult=0.125, num_classes=num_classes, input_h=size, input_w=size)
    cfg.blocks_per_stage = [1, 1, 1, 1]
    cfg.decoder_blocks = [1, 1, 1, 1, 1]
    return cfg
