"""End-to-end backbone: patch embedding, alternating ViT/MoE blocks, and
task-conditioned forward passes with per-stage counters.

Blocks follow the pre-norm residual arrangement: even-indexed blocks use the
dense two-layer MLP, odd-indexed blocks the mixture-of-experts layer (unless
the configuration disables experts, in which case every block is dense).
Features are bitwise deterministic in (weights, image, task); the
parallelism factor changes only the recorded schedule statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, self_attention
from .context import RunContext, StageCounters
from .fixedpoint import (
    FormatCatalog,
    FxTensor,
    QFormat,
    fx_add,
    requantize,
)
from .moe import ExpertMlp, ExpertParams, build_queues, gate_scores, moe_forward
from .unified_linear import BlockedWeights, LinearConfig, pack_blocked_weights, unified_linear

__all__ = [
    "LINEAR_MACS_PER_ITER",
    "LAYERNORM_EPS",
    "ModelConfig",
    "PRESETS",
    "ModelWeights",
    "RunReport",
    "patch_embed",
    "layer_norm",
    "vit_block",
    "moe_block",
    "forward",
    "generate_weights",
]

# nominal MAC throughput of the shared linear unit, used only to turn MAC
# counts into iteration proxies comparable with the attention schedules
LINEAR_MACS_PER_ITER = 4096

LAYERNORM_EPS = 2.0 ** -20


@dataclass(frozen=True)
class ModelConfig:
    """Backbone hyperparameters plus the working fixed-point formats.

    ``m_experts == 0`` turns every block into a dense ViT block (the plain
    transformer presets); otherwise odd-indexed blocks hold the experts.
    """

    n_blocks: int = 12
    d: int = 192
    mlp_dim: int = 768
    n_heads: int = 3
    m_experts: int = 16
    top_k: int = 2
    h_moe: int = 384
    patch_size: int = 16
    image_h: int = 128
    image_w: int = 256
    n_tasks: int = 2
    formats: FormatCatalog = FormatCatalog()

    def __post_init__(self) -> None:
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by {self.n_heads} heads")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError("image dimensions must be divisible by the patch size")
        if self.m_experts and self.top_k > self.m_experts:
            raise ValueError(f"top_k={self.top_k} exceeds m={self.m_experts}")
        if self.n_blocks < 1 or self.n_tasks < 1:
            raise ValueError("need at least one block and one task")

    @property
    def n_tokens(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size

    def block_is_moe(self, index: int) -> bool:
        return bool(self.m_experts) and index % 2 == 1

    @property
    def n_moe_blocks(self) -> int:
        return sum(self.block_is_moe(i) for i in range(self.n_blocks))


PRESETS: dict[str, ModelConfig] = {
    "m3vit": ModelConfig(),
    "vit-base": ModelConfig(n_blocks=12, d=768, mlp_dim=3072, n_heads=12,
                            m_experts=0, h_moe=1536, n_tasks=1),
    "vit-large": ModelConfig(n_blocks=24, d=1024, mlp_dim=4096, n_heads=16,
                             m_experts=0, h_moe=2048, n_tasks=1),
    "vit-huge": ModelConfig(n_blocks=32, d=1280, mlp_dim=5120, n_heads=16,
                            m_experts=0, h_moe=2560, n_tasks=1),
    "deit-small": ModelConfig(n_blocks=12, d=384, mlp_dim=1536, n_heads=6,
                              m_experts=0, h_moe=768, n_tasks=1),
}


@dataclass(frozen=True)
class LayerNormParams:
    gamma: FxTensor  # [d]
    beta: FxTensor  # [d]


@dataclass(frozen=True)
class MlpWeights:
    w1: BlockedWeights  # mlp_dim x d
    w2: BlockedWeights  # d x mlp_dim


@dataclass(frozen=True)
class BlockWeights:
    ln1: LayerNormParams
    attn: AttentionParams
    ln2: LayerNormParams
    mlp: MlpWeights | ExpertParams


@dataclass(frozen=True)
class ModelWeights:
    """Structured, packed weights for one model instance."""

    config: ModelConfig
    patch_proj: BlockedWeights  # d x patch_dim
    pos_embed: FxTensor  # [N, d] in a weight format
    blocks: tuple[BlockWeights, ...]
    gates: tuple[BlockedWeights, ...]  # one d->m gate per task
    final_ln: LayerNormParams

    def __post_init__(self) -> None:
        cfg = self.config
        if len(self.blocks) != cfg.n_blocks:
            raise ValueError(f"{len(self.blocks)} blocks != {cfg.n_blocks}")
        if cfg.m_experts and len(self.gates) != cfg.n_tasks:
            raise ValueError(f"{len(self.gates)} gates != {cfg.n_tasks} tasks")
        if self.pos_embed.shape != (cfg.n_tokens, cfg.d):
            raise ValueError(f"positional embedding shape {self.pos_embed.shape}")


@dataclass
class RunReport:
    """Per-stage counters of one forward pass.

    ``latency_proxy`` is the sum of stage iterations: attention stages use
    their schedule lengths, everything else converts MAC counts at the
    nominal shared-linear throughput.
    """

    task: int
    parallelism: int
    stages: list[StageCounters] = field(default_factory=list)

    def totals(self) -> dict[str, int]:
        keys = ("mac_count", "blocks_loaded", "iterations", "expert_loads",
                "overflow_events")
        return {k: sum(getattr(st, k) for st in self.stages) for k in keys}

    @property
    def latency_proxy(self) -> int:
        return sum(st.iterations for st in self.stages)

    @property
    def overflow_events(self) -> int:
        return self.totals()["overflow_events"]

    def stage_totals(self, name: str) -> dict[str, int]:
        keys = ("mac_count", "blocks_loaded", "iterations", "expert_loads",
                "overflow_events")
        picked = [st for st in self.stages if st.name == name]
        return {k: sum(getattr(st, k) for st in picked) for k in keys}

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "parallelism": self.parallelism,
            "stages": [st.as_dict() for st in self.stages],
            "totals": self.totals(),
            "latency_proxy": self.latency_proxy,
        }

    @staticmethod
    def from_dict(data: dict) -> "RunReport":
        report = RunReport(task=data["task"], parallelism=data["parallelism"])
        for st in data["stages"]:
            report.stages.append(StageCounters(**st))
        return report


def patch_embed(image: np.ndarray, weights: ModelWeights,
                ctx: RunContext) -> FxTensor:
    """Flatten raster-order patches, project to d, add positional embeddings."""
    cfg = weights.config
    if image.shape != (cfg.image_h, cfg.image_w):
        raise ValueError(
            f"image shape {image.shape} != ({cfg.image_h}, {cfg.image_w})"
        )
    p = cfg.patch_size
    grid_h, grid_w = cfg.image_h // p, cfg.image_w // p
    patches = (
        image.reshape(grid_h, p, grid_w, p)
        .transpose(0, 2, 1, 3)
        .reshape(cfg.n_tokens, cfg.patch_dim)
    )
    act = cfg.formats.activation
    tokens = FxTensor.from_real(patches, act, ctx)
    cfg_lin = LinearConfig(in_dim=cfg.patch_dim, out_dim=cfg.d,
                           bias_source="attention")
    with ctx.stage_scope("patch_embed"):
        projected = unified_linear(tokens, weights.patch_proj, cfg_lin, ctx=ctx)
        pos = requantize(weights.pos_embed, act, ctx)
        return fx_add(projected, pos, ctx=ctx)


def layer_norm(tokens: FxTensor, params: LayerNormParams,
               ctx: RunContext) -> FxTensor:
    """Per-token normalization in the wide real domain, quantized once.

    ``(x - mean) / sqrt(var + eps) * gamma + beta`` with ``eps = 2**-20``.
    """
    x = tokens.to_real()
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    norm = (x - mean) / np.sqrt(var + LAYERNORM_EPS)
    gamma = params.gamma.to_real()
    beta = params.beta.to_real()
    out = FxTensor.from_real(norm * gamma + beta, tokens.fmt, ctx)
    ctx.bump(mac_count=int(x.size))
    return out


def _mlp(tokens: FxTensor, mlp: MlpWeights, cfg: ModelConfig,
         ctx: RunContext) -> FxTensor:
    hidden = unified_linear(
        tokens, mlp.w1,
        LinearConfig(in_dim=cfg.d, out_dim=cfg.mlp_dim, apply_gelu=True,
                     bias_source="mlp"),
        ctx=ctx,
    )
    return unified_linear(
        hidden, mlp.w2,
        LinearConfig(in_dim=cfg.mlp_dim, out_dim=cfg.d, bias_source="mlp"),
        ctx=ctx,
    )


def vit_block(tokens: FxTensor, bw: BlockWeights, p: int, block: int,
              cfg: ModelConfig, ctx: RunContext) -> FxTensor:
    with ctx.stage_scope("layernorm", block):
        normed = layer_norm(tokens, bw.ln1, ctx)
    tokens = fx_add(tokens, self_attention(normed, bw.attn, p, block, ctx=ctx), ctx=ctx)
    with ctx.stage_scope("layernorm", block):
        normed = layer_norm(tokens, bw.ln2, ctx)
    with ctx.stage_scope("vit_mlp", block):
        out = _mlp(normed, bw.mlp, cfg, ctx)
    return fx_add(tokens, out, ctx=ctx)


def moe_block(tokens: FxTensor, bw: BlockWeights, task: int,
              gates: tuple[BlockedWeights, ...], p: int, block: int,
              cfg: ModelConfig, ctx: RunContext) -> FxTensor:
    with ctx.stage_scope("layernorm", block):
        normed = layer_norm(tokens, bw.ln1, ctx)
    tokens = fx_add(tokens, self_attention(normed, bw.attn, p, block, ctx=ctx), ctx=ctx)
    with ctx.stage_scope("layernorm", block):
        normed = layer_norm(tokens, bw.ln2, ctx)
    with ctx.stage_scope("gating", block):
        gr = gate_scores(normed, list(gates), task, k=cfg.top_k, ctx=ctx)
    mq = build_queues(gr, cfg.m_experts)
    with ctx.stage_scope("moe", block):
        out, _ = moe_forward(normed, bw.mlp, mq, gr, ctx=ctx)
    return fx_add(tokens, out, ctx=ctx)


_SCHEDULED_STAGES = {"qk", "mv"}


def forward(weights: ModelWeights, image: np.ndarray, task: int, p: int,
            ) -> tuple[FxTensor, RunReport]:
    """Full backbone pass returning features [N, d] and the run report.

    Task switching between calls touches only the gating-network read and
    the expert selections it induces; every backbone stage records identical
    counters for identical images regardless of the task.
    """
    cfg = weights.config
    if task < 0 or task >= cfg.n_tasks:
        raise KeyError(f"unknown task id {task} (have {cfg.n_tasks})")
    if p < 1 or p > cfg.n_tokens:
        raise ValueError(f"parallelism must be in [1, {cfg.n_tokens}]")
    with RunContext() as ctx:
        tokens = patch_embed(image, weights, ctx)
        for i, bw in enumerate(weights.blocks):
            if cfg.block_is_moe(i):
                tokens = moe_block(tokens, bw, task, weights.gates, p, i, cfg, ctx)
            else:
                tokens = vit_block(tokens, bw, p, i, cfg, ctx)
        with ctx.stage_scope("layernorm", None):
            tokens = layer_norm(tokens, weights.final_ln, ctx)
    report = RunReport(task=task, parallelism=p)
    for st in ctx.stages.values():
        if st.name not in _SCHEDULED_STAGES:
            st.iterations = -(-st.mac_count // LINEAR_MACS_PER_ITER)
        report.stages.append(st)
    return tokens, report


# ---------------------------------------------------------------------------
# Seed-reproducible random weights


def _draw_weight(rng, catalog: FormatCatalog, out_dim: int, in_dim: int,
                 scale: float) -> FxTensor:
    vals = rng.uniform(-scale, scale, (out_dim, in_dim))
    return FxTensor.from_real(vals, catalog.weight_format_for(vals))


def _draw_bias(rng, fmt: QFormat, n: int) -> FxTensor:
    return FxTensor.from_real(rng.uniform(-0.05, 0.05, n), fmt)


def _draw_linear(rng, catalog: FormatCatalog, out_dim: int, in_dim: int,
                 bias_source: str, scale: float | None = None) -> BlockedWeights:
    # magnitudes scale with 1/sqrt(fan-in) so activations stay well inside
    # a quarter of the representable range
    scale = scale if scale is not None else 1.0 / np.sqrt(in_dim)
    w = _draw_weight(rng, catalog, out_dim, in_dim, scale)
    fmt = catalog.bias_attention if bias_source == "attention" else catalog.bias_mlp
    b = _draw_bias(rng, fmt, out_dim)
    cfg = LinearConfig(in_dim=in_dim, out_dim=out_dim, bias_source=bias_source)
    return pack_blocked_weights(w, b, cfg)


def _draw_layernorm(rng, catalog: FormatCatalog, d: int) -> LayerNormParams:
    gamma = rng.uniform(0.9, 1.1, d)
    beta = rng.uniform(-0.05, 0.05, d)
    return LayerNormParams(
        gamma=FxTensor.from_real(gamma, catalog.weight_format_for(gamma)),
        beta=FxTensor.from_real(beta, catalog.weight_format_for(beta)),
    )


def generate_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    """Deterministic random weights: the same (config, seed) always yields
    bitwise-identical tensors, hence byte-identical weight files."""
    rng = np.random.default_rng(seed)
    cat = cfg.formats
    patch_proj = _draw_linear(rng, cat, cfg.d, cfg.patch_dim, "attention")
    pos_vals = rng.uniform(-0.5, 0.5, (cfg.n_tokens, cfg.d))
    pos_embed = FxTensor.from_real(pos_vals, cat.weight_format_for(pos_vals))
    blocks = []
    for i in range(cfg.n_blocks):
        ln1 = _draw_layernorm(rng, cat, cfg.d)
        attn = AttentionParams(
            wq=_draw_linear(rng, cat, cfg.d, cfg.d, "attention"),
            wk=_draw_linear(rng, cat, cfg.d, cfg.d, "attention"),
            wv=_draw_linear(rng, cat, cfg.d, cfg.d, "attention"),
            wo=_draw_linear(rng, cat, cfg.d, cfg.d, "attention"),
            n_heads=cfg.n_heads,
        )
        ln2 = _draw_layernorm(rng, cat, cfg.d)
        if cfg.block_is_moe(i):
            experts = tuple(
                ExpertMlp(
                    w1=_draw_linear(rng, cat, cfg.h_moe, cfg.d, "mlp"),
                    w2=_draw_linear(rng, cat, cfg.d, cfg.h_moe, "mlp"),
                )
                for _ in range(cfg.m_experts)
            )
            mlp: MlpWeights | ExpertParams = ExpertParams(experts=experts)
        else:
            mlp = MlpWeights(
                w1=_draw_linear(rng, cat, cfg.mlp_dim, cfg.d, "mlp"),
                w2=_draw_linear(rng, cat, cfg.d, cfg.mlp_dim, "mlp"),
            )
        blocks.append(BlockWeights(ln1=ln1, attn=attn, ln2=ln2, mlp=mlp))
    gates = tuple(
        _draw_linear(rng, cat, cfg.m_experts, cfg.d, "attention")
        for _ in range(cfg.n_tasks if cfg.m_experts else 0)
    )
    final_ln = _draw_layernorm(rng, cat, cfg.d)
    return ModelWeights(
        config=cfg,
        patch_proj=patch_proj,
        pos_embed=pos_embed,
        blocks=tuple(blocks),
        gates=gates,
        final_ln=final_ln,
    )
