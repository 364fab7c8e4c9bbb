"""Closed-form traffic/latency evaluation and report post-processing.

``analytic_attention_stats`` evaluates the four scheduling columns (data
load, latency, bandwidth, memory) as exact rationals in the token count and
parallelism; the event-counted schedules must reproduce them exactly
whenever ``p`` divides ``N``.  ``moe_load_overlap`` models double-buffered
expert loading: every load after the first hides behind the previous
expert's compute unless that queue was too short.  ``breakdown`` turns a
run report's per-stage iteration counts into latency shares.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .model import RunReport
from .moe import MetaQueue

__all__ = [
    "AnalyticStats",
    "StageBreakdown",
    "analytic_attention_stats",
    "moe_load_overlap",
    "breakdown",
]

STAGE_ORDER = (
    "patch_embed", "attention_linear", "qk", "mv", "vit_mlp", "moe",
    "gating", "layernorm",
)


@dataclass(frozen=True)
class AnalyticStats:
    """Closed-form schedule statistics, exact in N and p."""

    data_load: Fraction
    latency: Fraction
    bandwidth: Fraction  # streamed blocks per iteration at steady state
    memory: Fraction  # live token buffers

    def as_dict(self) -> dict:
        def num(x: Fraction):
            return int(x) if x.denominator == 1 else float(x)

        return {
            "data_load": num(self.data_load),
            "latency": num(self.latency),
            "bandwidth": num(self.bandwidth),
            "memory": num(self.memory),
        }


def analytic_attention_stats(n: int, p: int, reordered: bool) -> AnalyticStats:
    """The scheduling table row for one strategy at (n, p)."""
    if n < 1 or p < 1 or p > n:
        raise ValueError(f"need 1 <= p <= n, got n={n} p={p}")
    n_, p_ = Fraction(n), Fraction(p)
    if reordered:
        return AnalyticStats(
            data_load=n_ * n_ / p_ + n_ + p_ - 1,
            latency=n_ * n_ / p_ + p_ - 1,
            bandwidth=Fraction(1),
            memory=p_ + 1,
        )
    return AnalyticStats(
        data_load=n_ * n_ + n_,
        latency=n_ * n_ / p_,
        bandwidth=p_,
        memory=p_ + 1,
    )


def moe_load_overlap(mq: MetaQueue, load_cost: int, compute_cost: int) -> int:
    """Exposed expert-load latency under ping-pong (double-buffered) loading.

    The first expert's load is always exposed; each later load overlaps the
    previous expert's compute and is exposed only for the remainder
    ``max(0, load_cost - compute_cost * previous_queue_length)`` when that
    workload was too small to cover it.
    """
    if load_cost < 0 or compute_cost < 0:
        raise ValueError("costs must be nonnegative")
    if not mq.order:
        return 0
    exposed = load_cost
    for prev, _cur in zip(mq.order, mq.order[1:]):
        prev_work = compute_cost * int(mq.queues[prev].size)
        exposed += max(0, load_cost - prev_work)
    return exposed


@dataclass(frozen=True)
class StageBreakdown:
    """Share of the latency proxy attributed to each stage name."""

    shares: dict[str, float]
    total_iterations: int

    def as_dict(self) -> dict:
        return {
            "total_iterations": self.total_iterations,
            "shares": {k: self.shares[k] for k in sorted(self.shares)},
        }

    def render_text(self, width: int = 40) -> str:
        lines = []
        ordered = sorted(
            self.shares,
            key=lambda s: (STAGE_ORDER.index(s) if s in STAGE_ORDER else 99, s),
        )
        name_w = max(len(s) for s in ordered)
        for name in ordered:
            share = self.shares[name]
            bar = "#" * round(share * width)
            lines.append(f"{name:<{name_w}}  {share * 100:6.2f}%  {bar}")
        return "\n".join(lines)


def breakdown(report: RunReport) -> StageBreakdown:
    """Normalize per-stage iteration counts into latency shares."""
    if not report.stages:
        raise ValueError("report has no stages")
    per_name: dict[str, int] = {}
    for st in report.stages:
        per_name[st.name] = per_name.get(st.name, 0) + st.iterations
    total = sum(per_name.values())
    if total <= 0:
        raise ValueError("report has no recorded iterations")
    return StageBreakdown(
        shares={name: count / total for name, count in per_name.items()},
        total_iterations=total,
    )
