"""Bit-exact fixed-point inference engine for a multi-task mixture-of-experts
vision transformer, with exact scheduling-traffic accounting and an analytic
cost model."""

from .context import RunContext, StageCounters, current_context
from .fixedpoint import (
    FormatCatalog,
    FxTensor,
    FxValue,
    Overflow,
    QFormat,
    Rounding,
    dequantize,
    fx_add,
    fx_mul,
    fx_sub,
    quantize,
    requantize,
)
from .approx import (
    GeluTable,
    SoftmaxState,
    build_gelu_table,
    fx_exp,
    gelu,
    gelu_reference,
    gelu_sigmoid,
    gelu_tanh,
    softmax_finalize,
    softmax_stream,
    softmax_stream_update,
    softmax_three_pass,
)
from .unified_linear import (
    BlockedWeights,
    LinearConfig,
    flatten_indices,
    pack_blocked_weights,
    unified_linear,
)
from .attention import (
    AttentionParams,
    AttentionSchedule,
    Phase,
    ScoreRow,
    ScoreRows,
    TrafficStats,
    make_schedule,
    measure_traffic,
    run_mv,
    run_qk,
    self_attention,
)
from .moe import (
    ExpertMlp,
    ExpertParams,
    GatingResult,
    LoadStats,
    MetaQueue,
    build_queues,
    gate_scores,
    moe_forward,
    moe_forward_oracle,
    select_topk,
)
from .model import (
    PRESETS,
    ModelConfig,
    ModelWeights,
    RunReport,
    forward,
    generate_weights,
    layer_norm,
    moe_block,
    patch_embed,
    vit_block,
)
from .costmodel import (
    AnalyticStats,
    StageBreakdown,
    analytic_attention_stats,
    breakdown,
    moe_load_overlap,
)
from .weights_io import load_weights, save_weights

__version__ = "0.1.0"
