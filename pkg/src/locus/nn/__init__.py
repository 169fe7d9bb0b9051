from .tensor import MacCounter, Tensor, constant, no_grad, parameter
from .layers import (
    TBlockParams,
    bce_loss,
    layer_norm,
    multi_head_attention,
    softmax,
    transformer_block,
)
from .params import ParamStore, adam_step, glorot, init_tblock

__all__ = [
    "MacCounter",
    "Tensor",
    "constant",
    "no_grad",
    "parameter",
    "TBlockParams",
    "bce_loss",
    "layer_norm",
    "multi_head_attention",
    "softmax",
    "transformer_block",
    "ParamStore",
    "adam_step",
    "glorot",
    "init_tblock",
]
