"""Pixel-wise multimodal fusion kernels, cost model and desk-scale experiments."""

from .tensor import (
    ConfigError,
    DimensionError,
    DomainError,
    NumericError,
    ResourceError,
    Rng,
    StateError,
    count_macs,
    matmul,
    rng_normal,
    softmax_lastdim,
)
from .fusion import (
    ExchangeConfig,
    FusionParams,
    GeminiOptions,
    RelationParams,
    attention_trace,
    cross_attention,
    fusion_backward,
    geminifusion_forward,
    init_exchange_config,
    init_fusion_params,
    init_relation_params,
    pixelwise_cross_attention,
    relation_score,
    score_predict,
    score_predict_backward,
    token_exchange,
    token_exchange_backward,
)
from .cost import (
    CostReport,
    flops_cross_attention,
    flops_geminifusion,
    flops_report,
    flops_token_exchange,
    scaling_law,
)

__version__ = "0.1.0"
