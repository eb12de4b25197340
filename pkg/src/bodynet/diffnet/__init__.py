"""Differentiable compute core: tensors, layers, Adam and gradient checking."""

from .gradcheck import finite_diff_check
from .layers import (
    ENCODER_KERNELS,
    LayerSpec,
    adaptive_avg_pool1d,
    batchnorm_forward,
    conv1d_block_forward,
    dropout_forward,
    gru_forward,
    init_batchnorm,
    init_conv1d_block,
    init_gru,
    init_linear,
    init_multihead_attention,
    linear_forward,
    maxpool_forward,
    multihead_attention_forward,
)
from .optim import Adam, MissingGradientError, adam_step
from .params import CheckpointError, ParameterSet, SchemaVersionError, canonical_json
from .tensor import ShapeError, Tensor

__all__ = [
    "Adam",
    "CheckpointError",
    "ENCODER_KERNELS",
    "LayerSpec",
    "MissingGradientError",
    "ParameterSet",
    "SchemaVersionError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "adaptive_avg_pool1d",
    "batchnorm_forward",
    "canonical_json",
    "conv1d_block_forward",
    "dropout_forward",
    "finite_diff_check",
    "gru_forward",
    "init_batchnorm",
    "init_conv1d_block",
    "init_gru",
    "init_linear",
    "init_multihead_attention",
    "linear_forward",
    "maxpool_forward",
    "multihead_attention_forward",
]
