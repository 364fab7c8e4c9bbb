"""Task-conditioned gating and expert-by-expert mixture-of-experts execution.

Each token's gate logits select its top-k experts; token indices are grouped
into per-expert queues so every selected expert's weights are loaded exactly
once per pass (the metaqueue skips experts with empty queues entirely).  The
patch-by-patch oracle computes the same outputs token by token with a
single-expert weight buffer, reloading whenever the needed expert differs
from the buffered one; both paths accumulate each token's experts in
ascending expert id, so their outputs are bitwise identical while their load
counts expose the reordering advantage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .approx import GeluTable, build_row_states, finalize_rows
from .context import RunContext, current_context
from .fixedpoint import FxTensor, QFormat
from .unified_linear import BlockedWeights, LinearConfig, unified_linear

__all__ = [
    "GatingResult",
    "MetaQueue",
    "ExpertMlp",
    "ExpertParams",
    "LoadStats",
    "select_topk",
    "gate_scores",
    "build_queues",
    "moe_forward",
    "moe_forward_oracle",
]


@dataclass(frozen=True)
class GatingResult:
    """Per-token expert selection.

    ``expert_ids[t]`` holds the k selected experts in rank order (highest
    logit first, ties toward the lower id); ``weights`` are the softmax of
    the selected logits, so each token's weights are nonnegative and sum to
    one within k quantization steps.
    """

    logits: FxTensor  # [N, m]
    expert_ids: np.ndarray  # [N, k]
    weights: FxTensor  # [N, k]

    @property
    def top_k(self) -> int:
        return self.expert_ids.shape[1]

    def weight_lookup(self) -> np.ndarray:
        """Dense [N, m] raw gate-weight matrix (zero where unselected)."""
        n, m = self.logits.raw.shape
        table = np.zeros((n, m), dtype=np.int64)
        rows = np.arange(n)[:, None]
        table[rows, self.expert_ids] = self.weights.raw
        return table


@dataclass(frozen=True)
class MetaQueue:
    """Per-expert token queues, listing only experts with nonempty queues."""

    order: tuple[int, ...]  # ascending expert ids with nonzero queues
    queues: dict[int, np.ndarray]  # expert id -> strictly ascending token ids

    def __post_init__(self) -> None:
        for e in self.order:
            q = self.queues[e]
            if q.size == 0:
                raise ValueError(f"expert {e} listed with an empty queue")
            if np.any(np.diff(q) <= 0):
                raise ValueError(f"expert {e} queue not strictly ascending")

    @property
    def total_tokens(self) -> int:
        return sum(int(self.queues[e].size) for e in self.order)


@dataclass(frozen=True)
class ExpertMlp:
    """One expert: d -> h_moe with GELU, then h_moe -> d."""

    w1: BlockedWeights
    w2: BlockedWeights


@dataclass(frozen=True)
class ExpertParams:
    experts: tuple[ExpertMlp, ...]

    def __post_init__(self) -> None:
        if not self.experts:
            raise ValueError("at least one expert required")
        d, h = self.experts[0].w2.out_dim, self.experts[0].w1.out_dim
        for ex in self.experts:
            if (ex.w1.out_dim, ex.w1.in_dim) != (h, d) or (
                ex.w2.out_dim, ex.w2.in_dim) != (d, h):
                raise ValueError("experts must share dimensions")

    @property
    def d(self) -> int:
        return self.experts[0].w2.out_dim

    @property
    def h_moe(self) -> int:
        return self.experts[0].w1.out_dim


@dataclass(frozen=True)
class LoadStats:
    expert_loads: int
    tokens_computed: int


def select_topk(logits_row: FxTensor, k: int):
    """The k largest logits of one row as (expert_id, weight) pairs.

    Ties break toward the lower expert id; weights are the dynamic-bias
    softmax over just the selected logits.
    """
    m = logits_row.raw.size
    if k > m:
        raise ValueError(f"k={k} exceeds {m} experts")
    ids, weights = _topk_rows(logits_row.raw[np.newaxis, :], k, logits_row.fmt)
    return [(int(e), FxTensor(weights[0], logits_row.fmt).item(i))
            for i, e in enumerate(ids[0])]


def _topk_rows(logits_raw: np.ndarray, k: int, fmt: QFormat):
    # stable argsort on negated raws keeps lower ids first among ties
    order = np.argsort(-logits_raw, axis=1, kind="stable")
    ids = order[:, :k]
    selected = np.take_along_axis(logits_raw, ids, axis=1)
    b, s_raw, _ = build_row_states(selected, fmt)
    weights = finalize_rows(selected, b, s_raw, fmt)
    return ids, weights


def gate_scores(tokens: FxTensor, gates: list[BlockedWeights], task: int,
                k: int = 2, ctx: RunContext | None = None) -> GatingResult:
    """Score tokens with the task's gating network and pick top-k experts.

    Switching tasks only changes which gate parameters are read; the same
    task on the same tokens always reproduces the same selections.
    """
    ctx = ctx or current_context()
    if task < 0 or task >= len(gates):
        raise KeyError(f"unknown task id {task} (have {len(gates)} gates)")
    gate = gates[task]
    cfg = LinearConfig(in_dim=gate.in_dim, out_dim=gate.out_dim,
                       bias_source="attention")
    logits = unified_linear(tokens, gate, cfg, ctx=ctx)
    if k > gate.out_dim:
        raise ValueError(f"k={k} exceeds {gate.out_dim} experts")
    ids, weights = _topk_rows(logits.raw, k, logits.fmt)
    return GatingResult(
        logits=logits,
        expert_ids=ids,
        weights=FxTensor(weights, logits.fmt),
    )


def build_queues(result: GatingResult, m: int) -> MetaQueue:
    """Group token indices by selected expert, ascending, skipping experts
    that no token selected."""
    n = result.expert_ids.shape[0]
    queues: dict[int, np.ndarray] = {}
    order: list[int] = []
    for e in range(m):
        sel = np.flatnonzero(np.any(result.expert_ids == e, axis=1))
        if sel.size:
            order.append(e)
            queues[e] = sel.astype(np.int64)
    return MetaQueue(order=tuple(order), queues=queues)


def moe_forward(
    tokens: FxTensor,
    experts: ExpertParams,
    mq: MetaQueue,
    gr: GatingResult,
    gelu_table: GeluTable | None = None,
    ctx: RunContext | None = None,
) -> tuple[FxTensor, LoadStats]:
    """Expert-by-expert execution: one weight load per listed expert.

    For each expert in metaqueue order, all queued tokens run through the
    expert MLP via the sparse-indexed linear kernel and their gate-weighted
    outputs accumulate onto the output buffer.  Tokens absent from a queue
    are never touched by that expert.
    """
    ctx = ctx or current_context()
    n, d = tokens.raw.shape
    out = FxTensor.zeros((n, d), tokens.fmt)
    weight_table = gr.weight_lookup()
    loads = 0
    computed = 0
    for e in mq.order:
        loads += 1
        ex = experts.experts[e]
        idx = mq.queues[e]
        computed += int(idx.size)
        gate_w = FxTensor(weight_table[idx, e], gr.weights.fmt)
        hidden_cfg = LinearConfig(
            in_dim=experts.d, out_dim=experts.h_moe, token_indices=idx,
            apply_gelu=True, bias_source="mlp",
        )
        hidden = unified_linear(tokens, ex.w1, hidden_cfg,
                                gelu_table=gelu_table, ctx=ctx)
        acc_cfg = LinearConfig(
            in_dim=experts.h_moe, out_dim=experts.d, token_indices=idx,
            accumulate=gate_w, bias_source="mlp",
        )
        out = unified_linear(hidden, ex.w2, acc_cfg, out=out, ctx=ctx)
    ctx.bump(expert_loads=loads)
    return out, LoadStats(expert_loads=loads, tokens_computed=computed)


def moe_forward_oracle(
    tokens: FxTensor,
    experts: ExpertParams,
    gr: GatingResult,
    gelu_table: GeluTable | None = None,
    ctx: RunContext | None = None,
) -> tuple[FxTensor, LoadStats]:
    """Patch-by-patch execution with a single-expert weight buffer.

    A load is counted whenever the needed expert differs from the buffered
    one.  Each token's experts run in ascending id order, matching the
    reordered path's accumulation order, so outputs are bitwise identical
    to :func:`moe_forward`.
    """
    ctx = ctx or current_context()
    n, d = tokens.raw.shape
    out = FxTensor.zeros((n, d), tokens.fmt)
    weight_table = gr.weight_lookup()
    buffered: int | None = None
    loads = 0
    computed = 0
    for t in range(n):
        for e in sorted(int(v) for v in gr.expert_ids[t]):
            if e != buffered:
                loads += 1
                buffered = e
            computed += 1
            ex = experts.experts[e]
            idx = np.asarray([t], dtype=np.int64)
            gate_w = FxTensor(weight_table[idx, e], gr.weights.fmt)
            hidden = unified_linear(
                tokens, ex.w1,
                LinearConfig(in_dim=experts.d, out_dim=experts.h_moe,
                             token_indices=idx, apply_gelu=True,
                             bias_source="mlp"),
                gelu_table=gelu_table, ctx=ctx,
            )
            out = unified_linear(
                hidden, ex.w2,
                LinearConfig(in_dim=experts.h_moe, out_dim=experts.d,
                             token_indices=idx, accumulate=gate_w,
                             bias_source="mlp"),
                out=out, ctx=ctx,
            )
    return out, LoadStats(expert_loads=loads, tokens_computed=computed)
