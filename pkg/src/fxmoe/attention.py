"""Self-attention with the reordered streaming schedule and exact traffic
accounting.

The reordered schedule streams one K (or V) token block per iteration
against a local buffer of ``p`` cached rows.  Rows enter the buffer
staggered, one per iteration at the start of each batch window, so outputs
"missed" while a row was not yet resident are revisited during the next
batch's overlap window, with at most ``p - 1`` extra iterations at the very
end.  Streaming this way moves ``N**2/p + N + p - 1`` token blocks in
``N**2/p + p - 1`` iterations with a steady one-block-per-iteration demand
on the streamed matrix, versus ``N**2 + N`` blocks and a ``p``-blocks-per-
iteration demand without reordering.  Both shapes keep ``p + 1`` live token
buffers.

Values are independent of the schedule: score ``(i, j)`` is an exact integer
dot product requantized once, per-row softmax states are built over stored
scores in ascending ``j`` regardless of the order the schedule produced
them, and the value-matrix accumulation is an exact integer sum.  The
parallelism factor therefore changes traffic statistics only, never bits.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .approx import SoftmaxState, build_row_states, finalize_rows
from .context import RunContext, current_context
from .fixedpoint import FxTensor, _requantize_raw, exact_matmul
from .unified_linear import BlockedWeights, LinearConfig, unified_linear

__all__ = [
    "Phase",
    "EventKind",
    "Event",
    "AttentionSchedule",
    "TrafficStats",
    "ScoreRow",
    "ScoreRows",
    "AttentionParams",
    "make_schedule",
    "measure_traffic",
    "schedule_stats",
    "run_qk",
    "run_mv",
    "self_attention",
]


class Phase(enum.Enum):
    QK = "qk"
    MV = "mv"


class EventKind(enum.Enum):
    LOAD_Q_BATCH = "load_q"
    LOAD_K = "load_k"
    LOAD_V = "load_v"
    COMPUTE = "compute"
    WRITE_BACK = "write_back"


@dataclass(frozen=True)
class Event:
    iteration: int
    kind: EventKind
    tokens: tuple[int, ...]  # COMPUTE carries the (row, streamed) pair


@dataclass(frozen=True)
class AttentionSchedule:
    n_tokens: int
    parallelism: int
    phase: Phase
    reordered: bool
    n_iterations: int
    events: tuple[Event, ...]


@dataclass(frozen=True)
class TrafficStats:
    """Token-block DRAM transfers and schedule shape.

    ``peak_bandwidth_blocks_per_iter`` counts streamed-matrix (K or V) loads
    in the busiest iteration; cached-row loads are amortized one per row.
    """

    blocks_loaded: int
    latency_iters: int
    peak_bandwidth_blocks_per_iter: int
    live_buffers: int


def make_schedule(n: int, p: int, reordered: bool = True,
                  phase: Phase = Phase.QK) -> AttentionSchedule:
    """Enumerate the memory/compute events of one attention phase.

    In the QK phase rows are Q tokens loaded into the local buffer; in the
    MV phase rows are output accumulators written back as token blocks when
    they complete.  ``p`` must satisfy ``1 <= p <= n``.
    """
    if n < 1:
        raise ValueError(f"token count must be >= 1, got {n}")
    if p < 1 or p > n:
        raise ValueError(f"parallelism must be in [1, {n}], got {p}")
    stream_kind = EventKind.LOAD_K if phase is Phase.QK else EventKind.LOAD_V
    events: list[Event] = []
    if reordered:
        n_batches = -(-n // p)
        last_size = n - (n_batches - 1) * p
        total = (n_batches - 1) * n + n + last_size - 1
        for t in range(total):
            j = t % n
            events.append(Event(t, stream_kind, (j,)))
            g = t // n
            if g < n_batches:
                size_g = p if g < n_batches - 1 else last_size
                if j < size_g:
                    row = g * p + j
                    if phase is Phase.QK:
                        events.append(Event(t, EventKind.LOAD_Q_BATCH, (row,)))
            # resident rows: current batch's rows entered so far plus the
            # previous batch's rows still chasing their missed columns
            if g < n_batches:
                size_g = p if g < n_batches - 1 else last_size
                for c in range(min(j, size_g - 1) + 1):
                    events.append(Event(t, EventKind.COMPUTE, (g * p + c, j)))
            if g > 0:
                size_prev = p if g - 1 < n_batches - 1 else last_size
                for c in range(j + 1, size_prev):
                    row = (g - 1) * p + c
                    events.append(Event(t, EventKind.COMPUTE, (row, j)))
                    if phase is Phase.MV and j == c - 1:
                        events.append(Event(t, EventKind.WRITE_BACK, (row,)))
            if phase is Phase.MV and g < n_batches and j == n - 1:
                # the batch-aligned row finishes at its own window's end
                events.append(Event(t, EventKind.WRITE_BACK, (g * p,)))
        return AttentionSchedule(n, p, phase, True, total, tuple(events))

    iters_per_row = -(-n // p)
    total = n * iters_per_row
    for i in range(n):
        for w in range(iters_per_row):
            t = i * iters_per_row + w
            if w == 0 and phase is Phase.QK:
                events.append(Event(t, EventKind.LOAD_Q_BATCH, (i,)))
            for j in range(w * p, min(w * p + p, n)):
                events.append(Event(t, stream_kind, (j,)))
                events.append(Event(t, EventKind.COMPUTE, (i, j)))
            if w == iters_per_row - 1 and phase is Phase.MV:
                events.append(Event(t, EventKind.WRITE_BACK, (i,)))
    return AttentionSchedule(n, p, phase, False, total, tuple(events))


def measure_traffic(schedule: AttentionSchedule) -> TrafficStats:
    """Count the schedule's block transfers and validate buffer occupancy.

    Every ``(row, column)`` pair must be computed exactly once and at most
    ``p + 1`` token buffers (cached rows plus streamed blocks) may be live in
    any iteration; violations raise.
    """
    n, p = schedule.n_tokens, schedule.parallelism
    cap = p if schedule.reordered else 1  # cached-row buffer slots
    blocks = 0
    peak_stream = 0
    computed = np.zeros((n, n), dtype=bool)
    remaining = np.full(n, n, dtype=np.int64)
    resident: set[int] = set()
    max_live = 0
    it_stream = 0
    current_iter = 0

    def close_iteration():
        nonlocal peak_stream, it_stream
        peak_stream = max(peak_stream, it_stream)
        it_stream = 0

    for ev in schedule.events:
        if ev.iteration != current_iter:
            close_iteration()
            current_iter = ev.iteration
        if ev.kind in (EventKind.LOAD_K, EventKind.LOAD_V):
            blocks += 1
            it_stream += 1
        elif ev.kind is EventKind.LOAD_Q_BATCH:
            blocks += len(ev.tokens)
            for row in ev.tokens:
                if len(resident) == cap:
                    done = {r for r in resident if remaining[r] == 0}
                    if not done:
                        raise ValueError(
                            f"row buffer overflows {cap} slots at iteration {ev.iteration}"
                        )
                    resident.discard(done.pop())
                resident.add(row)
        elif ev.kind is EventKind.COMPUTE:
            i, j = ev.tokens
            if computed[i, j]:
                raise ValueError(f"pair ({i}, {j}) computed twice")
            computed[i, j] = True
            remaining[i] -= 1
            if schedule.phase is Phase.MV:
                resident.add(i)  # accumulator slot occupied until write-back
                if len(resident) > cap:
                    raise ValueError(
                        f"accumulator buffer overflows {cap} slots at iteration {ev.iteration}"
                    )
        elif ev.kind is EventKind.WRITE_BACK:
            blocks += len(ev.tokens)
            for row in ev.tokens:
                if remaining[row] != 0:
                    raise ValueError(f"row {row} written back before completion")
                resident.discard(row)
        max_live = max(max_live, len(resident) + it_stream)
    close_iteration()

    if not computed.all():
        raise ValueError("schedule left some (row, column) pairs uncomputed")
    return TrafficStats(
        blocks_loaded=blocks,
        latency_iters=schedule.n_iterations,
        peak_bandwidth_blocks_per_iter=peak_stream,
        live_buffers=max_live,
    )


@lru_cache(maxsize=256)
def schedule_stats(n: int, p: int, reordered: bool, phase: Phase) -> TrafficStats:
    """Cached measure of a generated schedule (one walk per configuration)."""
    return measure_traffic(make_schedule(n, p, reordered, phase))


@dataclass(frozen=True)
class ScoreRow:
    """One row of pre-softmax scores together with its streaming state."""

    scores: FxTensor  # [N]
    state: SoftmaxState


@dataclass(frozen=True)
class ScoreRows:
    """All score rows of one head: scores plus per-row (bias, sum) states."""

    scores: FxTensor  # [N, N]
    b_raw: np.ndarray  # [N]
    s_raw: np.ndarray  # [N]

    def row(self, i: int) -> ScoreRow:
        st = SoftmaxState(
            fmt=self.scores.fmt,
            b_raw=int(self.b_raw[i]),
            s_acc=float(self.s_raw[i]) * self.scores.fmt.ulp,
        )
        return ScoreRow(FxTensor(self.scores.raw[i], self.scores.fmt), st)


def run_qk(q: FxTensor, k: FxTensor, p: int, reordered: bool = True,
           scale_raw: int | None = None,
           ctx: RunContext | None = None) -> ScoreRows:
    """Score matrix plus streaming softmax states under the chosen schedule.

    ``score(i, j)`` is the exact integer dot product of row ``q[i]`` and row
    ``k[j]`` requantized once to the activation format; states are built by
    the streaming update over stored scores in ascending ``j``.  Results are
    bitwise independent of ``p``; only the recorded traffic changes.

    ``scale_raw``, when given, multiplies the wide dot products by that raw
    factor (in the q format's fraction) before the single requantization;
    plain dot products are the default.
    """
    ctx = ctx or current_context()
    if q.raw.ndim != 2 or k.raw.ndim != 2 or q.raw.shape[1] != k.raw.shape[1]:
        raise ValueError(f"head shapes differ: {q.raw.shape} vs {k.raw.shape}")
    n = q.raw.shape[0]
    acc = exact_matmul(q.raw, k.raw.T)
    frac = q.fmt.frac_bits + k.fmt.frac_bits
    if scale_raw is not None:
        peak = int(np.max(np.abs(acc))) if acc.size else 0
        if acc.dtype != object and peak * int(scale_raw) >= (1 << 62):
            acc = acc.astype(object)
        acc = acc * int(scale_raw)
        frac += q.fmt.frac_bits
    scores_raw = _requantize_raw(acc, frac, q.fmt, ctx)
    scores = FxTensor(np.asarray(scores_raw, dtype=np.int64), q.fmt)
    b_raw, s_raw, _ = build_row_states(scores.raw, q.fmt)
    stats = schedule_stats(n, p, reordered, Phase.QK)
    ctx.bump(
        mac_count=n * n * q.raw.shape[1],
        blocks_loaded=stats.blocks_loaded,
        iterations=stats.latency_iters,
    )
    return ScoreRows(scores=scores, b_raw=b_raw, s_raw=s_raw)


def run_mv(rows: ScoreRows, v: FxTensor, p: int, reordered: bool = True,
           ctx: RunContext | None = None) -> FxTensor:
    """Softmax-weighted value accumulation under the reverse schedule.

    Each output row is ``sum_j finalize(score[i, j]) * v[j]`` accumulated
    exactly in the wide domain over ascending ``j`` and requantized once, so
    outputs are bitwise independent of ``p``.
    """
    ctx = ctx or current_context()
    n = rows.scores.raw.shape[0]
    if v.raw.ndim != 2 or v.raw.shape[0] != n:
        raise ValueError(f"value matrix shape {v.raw.shape} does not match {n} rows")
    m_raw = finalize_rows(rows.scores.raw, rows.b_raw, rows.s_raw, rows.scores.fmt)
    acc = exact_matmul(m_raw, v.raw)
    frac = rows.scores.fmt.frac_bits + v.fmt.frac_bits
    out_raw = _requantize_raw(acc, frac, v.fmt, ctx)
    stats = schedule_stats(n, p, reordered, Phase.MV)
    ctx.bump(
        mac_count=n * n * v.raw.shape[1],
        blocks_loaded=stats.blocks_loaded,
        iterations=stats.latency_iters,
    )
    return FxTensor(np.asarray(out_raw, dtype=np.int64), v.fmt)


@dataclass(frozen=True)
class AttentionParams:
    """Packed projection layers for one attention module."""

    wq: BlockedWeights
    wk: BlockedWeights
    wv: BlockedWeights
    wo: BlockedWeights
    n_heads: int

    def __post_init__(self) -> None:
        d = self.wq.out_dim
        for w in (self.wq, self.wk, self.wv, self.wo):
            if (w.out_dim, w.in_dim) != (d, d):
                raise ValueError("attention projections must all be d x d")
        if d % self.n_heads:
            raise ValueError(f"d={d} not divisible by {self.n_heads} heads")


def self_attention(x: FxTensor, params: AttentionParams, p: int,
                   block: int | None = None, *, scale_scores: bool = False,
                   ctx: RunContext | None = None) -> FxTensor:
    """Multi-head attention: project, per-head QK then MV, concatenate,
    output-project.  Heads run sequentially; all stages record counters.

    Scores are plain dot products by default; ``scale_scores`` applies the
    conventional 1/sqrt(d_head) factor for experiments.
    """
    ctx = ctx or current_context()
    d = params.wq.out_dim
    if x.raw.ndim != 2 or x.raw.shape[1] != d:
        raise ValueError(f"input shape {x.raw.shape} does not match d={d}")
    d_head = d // params.n_heads
    scale_raw = None
    if scale_scores:
        scale_raw = int(np.floor(d_head ** -0.5 * 2.0 ** x.fmt.frac_bits))
    cfg = LinearConfig(in_dim=d, out_dim=d, bias_source="attention")
    with ctx.stage_scope("attention_linear", block):
        q = unified_linear(x, params.wq, cfg, ctx=ctx)
        k = unified_linear(x, params.wk, cfg, ctx=ctx)
        v = unified_linear(x, params.wv, cfg, ctx=ctx)
    head_outputs = []
    for h in range(params.n_heads):
        cols = slice(h * d_head, (h + 1) * d_head)
        qh = FxTensor(q.raw[:, cols], q.fmt)
        kh = FxTensor(k.raw[:, cols], k.fmt)
        vh = FxTensor(v.raw[:, cols], v.fmt)
        with ctx.stage_scope("qk", block):
            rows = run_qk(qh, kh, p, scale_raw=scale_raw, ctx=ctx)
        with ctx.stage_scope("mv", block):
            head_outputs.append(run_mv(rows, vh, p, ctx=ctx).raw)
    concat = FxTensor(np.concatenate(head_outputs, axis=1), x.fmt)
    with ctx.stage_scope("attention_linear", block):
        return unified_linear(concat, params.wo, cfg, ctx=ctx)
