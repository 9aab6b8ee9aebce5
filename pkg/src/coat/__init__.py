"""Conv-attentional image transformer kernels, blocks and models in numpy."""

from coat.attention import (
    ConvAttConfig,
    ConvAttention,
    PositionEncodings,
    TokenSeq,
    conv_attention_module,
    cpe,
    crpe,
    factorized_attention,
    rel_factor_att_oracle,
    scaled_dot_product_attention,
)
from coat.autograd import Graph, GradReport, finite_diff_check, grad
from coat.blocks import (
    FFN,
    ParallelGroup,
    ParallelGroupConfig,
    SerialBlock,
    SerialBlockConfig,
    ffn,
    parallel_group_cross_attn,
    parallel_group_interp,
    patch_embed,
    serial_block,
)
from coat.bench import ScalingRecord, fit_loglog_slope, measure_scaling
from coat.errors import ConfigError, ContractError, CoatError, DimensionError, NumericError
from coat.model import MODELS, CoaT, ModelSpec, build_model, count_flops, count_params, forward
from coat.tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "CoaT", "CoatError", "ConfigError", "ContractError", "ConvAttConfig", "ConvAttention", "DimensionError",
    "FFN", "GradReport", "Graph", "MODELS", "ModelSpec", "NumericError", "ParallelGroup",
    "ParallelGroupConfig", "PositionEncodings", "ScalingRecord", "SerialBlock", "SerialBlockConfig",
    "Tensor", "TokenSeq", "build_model", "conv_attention_module", "count_flops", "count_params", "cpe",
    "crpe", "factorized_attention", "ffn", "finite_diff_check", "fit_loglog_slope", "forward", "grad",
    "measure_scaling", "parallel_group_cross_attn", "parallel_group_interp", "patch_embed",
    "rel_factor_att_oracle", "scaled_dot_product_attention", "serial_block",
]
