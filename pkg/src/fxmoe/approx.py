"""Hardware-friendly nonlinear kernels: fixed-point exp, streaming softmax,
and a ReLU-plus-lookup-table GELU, each with a high-precision reference.

Softmax semantics
-----------------
The streaming softmax follows the online max-and-sum recurrence: the running
bias ``b`` is the fixed-point maximum seen so far, and every exponential
argument is an exact raw difference against ``b``, so arguments are always
<= 0 and the exponential output can never overflow the activation format.

Because exponent arguments are exact fixed-point differences, they telescope
exactly across bias changes: ``(x - b1) + (b1 - b2) = x - b2`` holds at the
raw-integer level.  The denominator is therefore accumulated in the
exponential unit's high-precision domain and quantized when the state is
read, which makes the streaming state bitwise equal to the three-pass
computation (max, then sum, then divide) for any input order of the same
vector.  Requantizing the partial sum after every update would break that
equivalence: truncation of the rescale product ``s * exp(b_old - b_new)``
composes differently from quantizing each term once against the final bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf

from .context import RunContext
from .fixedpoint import (
    FormatCatalog,
    FxTensor,
    FxValue,
    QFormat,
    Rounding,
    _fit_raw,
    _fit_raw_scalar,
    _round_scaled,
    _shift_raw,
)

__all__ = [
    "fx_exp",
    "SoftmaxState",
    "softmax_stream_update",
    "softmax_finalize",
    "softmax_stream",
    "softmax_three_pass",
    "build_row_states",
    "finalize_rows",
    "GeluTable",
    "build_gelu_table",
    "gelu",
    "gelu_reference",
    "gelu_tanh",
    "gelu_sigmoid",
]

_ACT = FormatCatalog().activation


# ---------------------------------------------------------------------------
# Exponential


def _exp_unit(arg_raw, frac_bits: int):
    """The high-precision exponential of a raw fixed-point argument.

    ``arg_raw`` may be a Python int, int64, or an int64 array; the argument
    value ``arg_raw * 2**-frac_bits`` is formed exactly in float64 (raw
    magnitudes here stay below 2**53).  All exponentials in the package go
    through this one numpy routine so scalar and vector paths agree bitwise.
    """
    return np.exp(np.asarray(arg_raw, dtype=np.float64) * 2.0 ** -frac_bits)


def fx_exp(x, out_fmt: QFormat | None = None, ctx: RunContext | None = None):
    """``quantize(e**dequantize(x))`` in the activation format.

    Overflow follows the output format's policy and is counted; arguments
    <= 0 always land in (0, 1] and can never overflow.
    """
    if out_fmt is None:
        out_fmt = x.fmt if x.fmt.frac_bits == _ACT.frac_bits else _ACT
    if isinstance(x, FxValue):
        val = _exp_unit(x.raw, x.fmt.frac_bits)
        raw = int(_round_scaled(val * np.float64(2.0 ** out_fmt.frac_bits), out_fmt.rounding))
        return FxValue(_fit_raw_scalar(raw, out_fmt, ctx), out_fmt)
    val = _exp_unit(x.raw, x.fmt.frac_bits)
    raw = _round_scaled(val * np.float64(2.0 ** out_fmt.frac_bits), out_fmt.rounding)
    return FxTensor(_fit_raw(raw, out_fmt, ctx), out_fmt)


# ---------------------------------------------------------------------------
# Streaming softmax


@dataclass(frozen=True)
class SoftmaxState:
    """Running (bias, denominator) pair for one softmax row.

    ``b_raw`` is the raw running maximum; ``s_acc`` carries the denominator
    sum in the exponential unit's domain and materializes as an activation-
    format value through :attr:`s`.  A fresh state has ``b`` at the format
    minimum (the fixed-point stand-in for -inf) and an empty sum.
    """

    fmt: QFormat
    b_raw: int | None = None
    s_acc: float = 0.0

    @property
    def b(self) -> FxValue:
        raw = self.fmt.raw_min if self.b_raw is None else self.b_raw
        return FxValue(raw, self.fmt)

    @property
    def s(self) -> FxValue:
        raw = int(_round_scaled(
            np.float64(self.s_acc * 2.0 ** self.fmt.frac_bits), self.fmt.rounding
        ))
        return FxValue(_fit_raw_scalar(raw, self.fmt, None), self.fmt)


def softmax_stream_update(state: SoftmaxState, x) -> SoftmaxState:
    """Fold one element into the running (bias, sum) state.

    A new maximum rescales the existing sum by ``exp(b - x)`` and contributes
    ``exp(0) = 1``; other elements add ``exp(x - b)``.  Both exponential
    arguments are exact raw differences and are <= 0 by construction.
    """
    x_raw = x.raw if isinstance(x, FxValue) else int(x)
    frac = state.fmt.frac_bits
    b_raw = state.fmt.raw_min if state.b_raw is None else state.b_raw
    if x_raw > b_raw:
        scale = float(_exp_unit(b_raw - x_raw, frac)) if state.s_acc else 0.0
        return replace(state, b_raw=x_raw, s_acc=state.s_acc * scale + 1.0)
    return replace(state, b_raw=b_raw, s_acc=state.s_acc + float(_exp_unit(x_raw - b_raw, frac)))


def softmax_finalize(x, state: SoftmaxState, ctx: RunContext | None = None) -> FxValue:
    """``exp(x - b) / s`` in the state's format; the result lies in [0, 1].

    Raises if the denominator is not positive, which is impossible once any
    element has been processed and therefore signals a harness bug.
    """
    s_raw = state.s.raw
    if s_raw <= 0:
        raise ZeroDivisionError("softmax denominator is empty: state was never updated")
    x_raw = x.raw if isinstance(x, FxValue) else int(x)
    frac = state.fmt.frac_bits
    e_raw = int(_round_scaled(
        _exp_unit(x_raw - state.b_raw, frac) * np.float64(2.0 ** frac),
        state.fmt.rounding,
    ))
    return FxValue((e_raw << frac) // s_raw, state.fmt)


def softmax_stream(xs: FxTensor, ctx: RunContext | None = None):
    """Single-pass softmax over a vector: stream updates, then finalize.

    Returns ``(outputs, state)``.
    """
    if xs.raw.size == 0:
        raise ValueError("softmax of an empty vector")
    state = SoftmaxState(fmt=xs.fmt)
    for r in xs.raw:
        state = softmax_stream_update(state, int(r))
    out = finalize_rows(xs.raw[np.newaxis, :], np.asarray([state.b_raw]),
                        np.asarray([state.s.raw]), xs.fmt)
    return FxTensor(out[0], xs.fmt), state


def softmax_three_pass(xs: FxTensor, ctx: RunContext | None = None):
    """Reference softmax: pass 1 takes the max, pass 2 sums ``exp(x - b)``
    in index order, pass 3 divides.  Returns ``(outputs, state)``.
    """
    if xs.raw.size == 0:
        raise ValueError("softmax of an empty vector")
    b_raw = int(np.max(xs.raw))
    frac = xs.fmt.frac_bits
    terms = _exp_unit(xs.raw - b_raw, frac)
    s_acc = 0.0
    for t in terms:
        s_acc += float(t)
    state = SoftmaxState(fmt=xs.fmt, b_raw=b_raw, s_acc=s_acc)
    out = finalize_rows(xs.raw[np.newaxis, :], np.asarray([b_raw]),
                        np.asarray([state.s.raw]), xs.fmt)
    return FxTensor(out[0], xs.fmt), state


def build_row_states(scores_raw: np.ndarray, fmt: QFormat):
    """Streaming-state construction for many rows at once.

    Walks columns in ascending index order applying the same update rule as
    :func:`softmax_stream_update` elementwise, so each row's resulting state
    is bitwise identical to scalar streaming over that row.

    Returns ``(b_raw, s_raw, s_acc)`` arrays, one entry per row.
    """
    rows, n = scores_raw.shape
    frac = fmt.frac_bits
    b = np.full(rows, fmt.raw_min, dtype=np.int64)
    s = np.zeros(rows, dtype=np.float64)
    started = np.zeros(rows, dtype=bool)
    for j in range(n):
        x = scores_raw[:, j]
        is_new_max = x > b
        # each branch's argument is clamped on the lanes the other branch
        # owns (those results are discarded by the select below)
        rescale = np.where(started, _exp_unit(np.minimum(b - x, 0), frac), 0.0)
        grown = s * rescale + 1.0
        added = s + _exp_unit(np.minimum(x - b, 0), frac)
        s = np.where(is_new_max, grown, added)
        b = np.where(is_new_max, x, b)
        started |= True
    s_raw = _round_scaled(s * np.float64(2.0 ** frac), fmt.rounding)
    return b, s_raw, s


def finalize_rows(scores_raw: np.ndarray, b_raw: np.ndarray, s_raw: np.ndarray,
                  fmt: QFormat) -> np.ndarray:
    """Vectorized :func:`softmax_finalize` over whole rows of raw scores."""
    if np.any(s_raw <= 0):
        raise ZeroDivisionError("softmax denominator is empty for at least one row")
    frac = fmt.frac_bits
    e = _round_scaled(
        _exp_unit(scores_raw - b_raw[:, None], frac) * np.float64(2.0 ** frac),
        fmt.rounding,
    )
    return (e << frac) // s_raw[:, None]


# ---------------------------------------------------------------------------
# GELU


def gelu_reference(x):
    """Exact GELU via the Gauss error function: ``x * 0.5 * (1 + erf(x/sqrt(2)))``."""
    x = np.asarray(x, dtype=np.float64)
    out = x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    return float(out) if out.ndim == 0 else out


def gelu_tanh(x):
    """The tanh-based GELU approximation."""
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))
    return float(out) if out.ndim == 0 else out


def gelu_sigmoid(x):
    """The sigmoid-based GELU approximation ``x * sigmoid(1.702 x)``."""
    x = np.asarray(x, dtype=np.float64)
    out = x / (1.0 + np.exp(-1.702 * x))
    return float(out) if out.ndim == 0 else out


def gelu_delta(x):
    """``ReLU(x) - GELU(x)``: even, in [0, 1), and -> 0 as |x| grows."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) - gelu_reference(x)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class GeluTable:
    """Uniformly sampled correction values ``delta(i * step)``.

    ``step`` is a negative power of two so index computation is a bit shift.
    Entries hold only fractional bits (delta is in [0, 1)).  Beyond
    ``cutoff = len(entries) - 1`` steps, delta is below the resolution at
    which GELU still differs from ReLU and lookups fall back to plain ReLU.
    """

    step: float
    step_log2: int  # step == 2**-step_log2
    entries: np.ndarray  # raw values in entry_fmt
    entry_fmt: QFormat

    @property
    def cutoff(self) -> float:
        return (len(self.entries) - 1) * self.step

    @property
    def cutoff_index(self) -> int:
        return len(self.entries) - 1


def build_gelu_table(step: float = 2.0 ** -10,
                     entry_fmt: QFormat | None = None) -> GeluTable:
    """Tabulate ``delta`` on multiples of ``step`` out to where it falls
    below ``2**-23`` (past which GELU rounds to ReLU at entry resolution)."""
    if entry_fmt is None:
        entry_fmt = FormatCatalog().gelu_lut_entry
    mant, exp = math.frexp(step)
    if mant != 0.5 or step >= 1.0 or step <= 0.0:
        raise ValueError(f"step must be a negative power of two, got {step}")
    step_log2 = 1 - exp

    tail = 2.0 ** -23
    # delta rises to its single peak (near x = 0.75) and then decays; the
    # cutoff is the first grid point past the peak below the tail threshold.
    i = max(1, int(round(1.0 / step)))
    while gelu_delta(i * step) >= tail:
        i += 1
    cutoff_index = i
    values = gelu_delta(np.arange(cutoff_index + 1, dtype=np.float64) * step)
    raw = _fit_raw(
        _round_scaled(values * np.float64(2.0 ** entry_fmt.frac_bits), entry_fmt.rounding),
        entry_fmt, None,
    )
    return GeluTable(step=step, step_log2=step_log2, entries=raw, entry_fmt=entry_fmt)


def gelu(x, table: GeluTable, ctx: RunContext | None = None):
    """``ReLU(x) - delta(|x|)`` via one table read; plain ReLU past the cutoff.

    The index is ``|x| / step`` rounded half-up, computed by bit shift.  The
    subtraction runs at entry precision and rounds to the input's format
    half-to-even.
    """
    scalar = isinstance(x, FxValue)
    raw = np.asarray([x.raw] if scalar else x.raw, dtype=np.int64)
    fmt = x.fmt
    shift = fmt.frac_bits - table.step_log2
    if shift < 0:
        raise ValueError("table step finer than the input format resolution")
    half = 1 << (shift - 1) if shift > 0 else 0
    idx = (np.abs(raw) + half) >> shift

    relu = np.maximum(raw, 0)
    in_range = idx <= table.cutoff_index
    delta_raw = table.entries[np.minimum(idx, table.cutoff_index)]
    ef = table.entry_fmt.frac_bits
    wide = max(ef, fmt.frac_bits)
    corrected = _shift_raw(
        (relu << (wide - fmt.frac_bits)) - (delta_raw << (wide - ef)),
        wide - fmt.frac_bits,
        Rounding.NEAREST_EVEN,
    )
    out = np.where(in_range, corrected, relu)
    if scalar:
        return FxValue(int(out[0]), fmt)
    return FxTensor(out, fmt)


# ---------------------------------------------------------------------------
# Error reports (consumed by the command-line front end)


def gelu_error_report(step: float, grid_n: int, lo: float = -8.0, hi: float = 8.0) -> dict:
    """Max/mean error of the table kernel and both closed-form
    approximations against the erf reference on a uniform grid."""
    table = build_gelu_table(step)
    grid = np.linspace(lo, hi, grid_n)
    xs = FxTensor.from_real(grid, _ACT)
    dequant = xs.to_real()
    exact = gelu_reference(dequant)
    with RunContext() as probe:
        approx_vals = gelu(xs, table).to_real()
    lut_err = np.abs(approx_vals - exact)
    tanh_err = np.abs(gelu_tanh(dequant) - exact)
    sig_err = np.abs(gelu_sigmoid(dequant) - exact)
    return {
        "step": step,
        "grid_points": grid_n,
        "table_entries": len(table.entries),
        "cutoff": table.cutoff,
        "max_abs_error": float(lut_err.max()),
        "mean_abs_error": float(lut_err.mean()),
        "tanh_max_abs_error": float(tanh_err.max()),
        "sigmoid_max_abs_error": float(sig_err.max()),
        "overflow_events": probe.overflow_events,
    }


def softmax_error_report(length: int, trials: int, seed: int) -> dict:
    """Streaming-vs-three-pass agreement and accuracy stats over random
    full-range vectors."""
    rng = np.random.default_rng(seed)
    bitwise_matches = 0
    max_abs_err = 0.0
    mean_abs_err = 0.0
    max_sum_dev = 0.0
    with RunContext() as probe:
        for _ in range(trials):
            xs = FxTensor.from_real(
                rng.uniform(_ACT.min_value, _ACT.max_value, size=length), _ACT
            )
            out_s, st_s = softmax_stream(xs)
            out_t, st_t = softmax_three_pass(xs)
            if (st_s.b_raw, st_s.s.raw) == (st_t.b_raw, st_t.s.raw):
                bitwise_matches += 1
            vals = out_s.to_real()
            ref = np.exp(xs.to_real() - xs.to_real().max())
            ref /= ref.sum()
            err = np.abs(vals - ref)
            max_abs_err = max(max_abs_err, float(err.max()))
            mean_abs_err += float(err.mean())
            max_sum_dev = max(max_sum_dev, abs(float(vals.sum()) - 1.0))
    return {
        "length": length,
        "trials": trials,
        "seed": seed,
        "bitwise_state_matches": bitwise_matches,
        "max_abs_error_vs_float": max_abs_err,
        "mean_abs_error_vs_float": mean_abs_err / max(trials, 1),
        "max_output_sum_deviation": max_sum_dev,
        "overflow_events": probe.overflow_events,
    }
