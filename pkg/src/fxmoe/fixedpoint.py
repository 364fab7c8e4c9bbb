"""Binary fixed-point formats and exact, deterministic arithmetic.

A :class:`QFormat` fixes total width, integer bits, signedness and the
rounding/overflow policies.  Values are carried as two's-complement raw
integers scaled by ``2**-frac_bits``; scalars as :class:`FxValue`, arrays as
:class:`FxTensor` (raw ``int64`` regardless of format width, so intermediate
integer arithmetic never overflows the carrier for in-scope shapes).

Arithmetic is defined as exact integer operations on raws followed by a
single requantization to the declared result format, so the same inputs give
bitwise-identical outputs on every run.  Out-of-range requantizations record
one event per element on the active :class:`~fxmoe.context.RunContext`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .context import RunContext, current_context

__all__ = [
    "Overflow",
    "Rounding",
    "QFormat",
    "FxValue",
    "FxTensor",
    "FormatCatalog",
    "quantize",
    "dequantize",
    "requantize",
    "fx_add",
    "fx_sub",
    "fx_mul",
    "exact_matmul",
]


class Overflow(enum.Enum):
    WRAP = "wrap"
    SATURATE = "saturate"


class Rounding(enum.Enum):
    """TRUNCATE drops bits (rounds toward -inf); NEAREST_EVEN ties to even."""

    TRUNCATE = "truncate"
    NEAREST_EVEN = "nearest_even"


@dataclass(frozen=True)
class QFormat:
    """A fixed-point number format.

    ``int_bits`` counts bits left of the binary point excluding the sign bit,
    so ``frac_bits = width_bits - int_bits - (1 if signed else 0)``.
    Signed formats represent ``[-2**int_bits, 2**int_bits - 2**-frac_bits]``.
    """

    width_bits: int
    int_bits: int
    signed: bool = True
    overflow: Overflow = Overflow.WRAP
    rounding: Rounding = Rounding.TRUNCATE

    def __post_init__(self) -> None:
        if self.width_bits < 1:
            raise ValueError(f"width_bits must be >= 1, got {self.width_bits}")
        if self.int_bits < 0:
            raise ValueError(f"int_bits must be >= 0, got {self.int_bits}")
        if self.frac_bits < 0:
            raise ValueError(
                f"format {self.width_bits}w/{self.int_bits}i leaves "
                f"{self.frac_bits} fractional bits"
            )

    @property
    def frac_bits(self) -> int:
        return self.width_bits - self.int_bits - (1 if self.signed else 0)

    @property
    def raw_min(self) -> int:
        return -(1 << (self.width_bits - 1)) if self.signed else 0

    @property
    def raw_max(self) -> int:
        return (1 << (self.width_bits - 1)) - 1 if self.signed else (1 << self.width_bits) - 1

    @property
    def min_value(self) -> float:
        return self.raw_min * 2.0 ** -self.frac_bits

    @property
    def max_value(self) -> float:
        return self.raw_max * 2.0 ** -self.frac_bits

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits

    def with_policies(
        self, overflow: Overflow | None = None, rounding: Rounding | None = None
    ) -> "QFormat":
        return replace(
            self,
            overflow=self.overflow if overflow is None else overflow,
            rounding=self.rounding if rounding is None else rounding,
        )

    def describe(self) -> str:
        sign = "s" if self.signed else "u"
        return f"{sign}{self.width_bits}.{self.int_bits}i{self.frac_bits}f"


@dataclass(frozen=True)
class FxValue:
    """One fixed-point scalar: a raw two's-complement integer plus its format."""

    raw: int
    fmt: QFormat

    @property
    def value(self) -> float:
        return self.raw * 2.0 ** -self.fmt.frac_bits

    def __repr__(self) -> str:
        return f"FxValue({self.value!r} raw={self.raw} {self.fmt.describe()})"


@dataclass(frozen=True)
class FxTensor:
    """A shaped array of fixed-point values sharing one format.

    ``raw`` is always ``int64`` and row-major; shape is the array's shape.
    """

    raw: np.ndarray
    fmt: QFormat

    def __post_init__(self) -> None:
        if self.raw.dtype != np.int64:
            object.__setattr__(self, "raw", self.raw.astype(np.int64))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.raw.shape

    def to_real(self) -> np.ndarray:
        return self.raw.astype(np.float64) * 2.0 ** -self.fmt.frac_bits

    def item(self, *idx) -> FxValue:
        return FxValue(int(self.raw[idx]), self.fmt)

    @staticmethod
    def zeros(shape: tuple[int, ...], fmt: QFormat) -> "FxTensor":
        return FxTensor(np.zeros(shape, dtype=np.int64), fmt)

    @staticmethod
    def from_real(x, fmt: QFormat, ctx: RunContext | None = None) -> "FxTensor":
        arr = np.asarray(x, dtype=np.float64)
        return FxTensor(_quantize_raw(arr, fmt, ctx), fmt)


def _round_scaled(scaled: np.ndarray, rounding: Rounding) -> np.ndarray:
    if rounding is Rounding.TRUNCATE:
        return np.floor(scaled).astype(np.int64)
    return np.rint(scaled).astype(np.int64)


def _fit_raw(raw: np.ndarray, fmt: QFormat, ctx: RunContext | None) -> np.ndarray:
    """Apply the overflow policy to raws, counting out-of-range elements."""
    lo, hi = fmt.raw_min, fmt.raw_max
    over = np.count_nonzero((raw < lo) | (raw > hi))
    if over:
        (ctx or current_context()).count_overflow(int(over))
        if fmt.overflow is Overflow.SATURATE:
            raw = np.clip(raw, lo, hi)
        else:
            span = 1 << fmt.width_bits
            raw = raw & (span - 1)
            if fmt.signed:
                raw = raw - ((raw >> (fmt.width_bits - 1)) << fmt.width_bits)
    return raw


def _fit_raw_scalar(raw: int, fmt: QFormat, ctx: RunContext | None) -> int:
    lo, hi = fmt.raw_min, fmt.raw_max
    if raw < lo or raw > hi:
        (ctx or current_context()).count_overflow(1)
        if fmt.overflow is Overflow.SATURATE:
            return min(max(raw, lo), hi)
        raw &= (1 << fmt.width_bits) - 1
        if fmt.signed and raw > hi:
            raw -= 1 << fmt.width_bits
    return raw


def _quantize_raw(x: np.ndarray, fmt: QFormat, ctx: RunContext | None = None) -> np.ndarray:
    scaled = x * np.float64(2.0 ** fmt.frac_bits)
    return _fit_raw(_round_scaled(scaled, fmt.rounding), fmt, ctx)


def _shift_raw(raw, shift: int, rounding: Rounding):
    """Rescale raws by 2**-shift (shift >= 0 drops bits per the rounding mode)."""
    if shift == 0:
        return raw
    if shift < 0:
        return raw << (-shift)
    if rounding is Rounding.TRUNCATE:
        return raw >> shift  # arithmetic shift: floor for negatives too
    half = 1 << (shift - 1)
    q = (raw + half) >> shift
    # ties (remainder exactly half) must go to even, not up
    tie = (raw & ((1 << shift) - 1)) == half
    if isinstance(q, np.ndarray):
        q = q - (tie & ((q & 1) == 1))
    elif tie and (q & 1):
        q -= 1
    return q


def _requantize_raw(raw, from_frac: int, to_fmt: QFormat, ctx: RunContext | None = None):
    shifted = _shift_raw(raw, from_frac - to_fmt.frac_bits, to_fmt.rounding)
    if isinstance(shifted, np.ndarray):
        return _fit_raw(shifted, to_fmt, ctx)
    return _fit_raw_scalar(int(shifted), to_fmt, ctx)


def quantize(x, fmt: QFormat, ctx: RunContext | None = None):
    """Round a real number (or array) into ``fmt`` per its policies.

    Returns an :class:`FxValue` for scalar input, an :class:`FxTensor`
    otherwise.  Out-of-range inputs are absorbed by the overflow policy and
    counted on the active run context.
    """
    if np.ndim(x) == 0:
        raw = _quantize_raw(np.asarray([x], dtype=np.float64), fmt, ctx)
        return FxValue(int(raw[0]), fmt)
    return FxTensor.from_real(x, fmt, ctx)


def dequantize(v):
    """The exact real value ``raw * 2**-frac_bits``."""
    if isinstance(v, FxValue):
        return v.value
    return v.to_real()


def requantize(v, target: QFormat, ctx: RunContext | None = None):
    """Re-represent a fixed-point value in another format.

    Bit-exact whenever the target's range and precision both cover the input
    (e.g. widening either 16-bit bias format into the widened bias type);
    otherwise the target's rounding/overflow policies apply.
    """
    if isinstance(v, FxValue):
        return FxValue(_requantize_raw(v.raw, v.fmt.frac_bits, target, ctx), target)
    return FxTensor(_requantize_raw(v.raw, v.fmt.frac_bits, target, ctx), target)


def _binary_op(a, b, out_fmt, ctx, op):
    if out_fmt is None:
        out_fmt = a.fmt
    raw, frac = op(a.raw, a.fmt, b.raw, b.fmt)
    out_raw = _requantize_raw(raw, frac, out_fmt, ctx)
    if isinstance(a, FxValue) and isinstance(b, FxValue):
        return FxValue(int(out_raw), out_fmt)
    return FxTensor(np.asarray(out_raw, dtype=np.int64), out_fmt)


def _aligned_sum(a_raw, a_fmt, b_raw, b_fmt):
    frac = max(a_fmt.frac_bits, b_fmt.frac_bits)
    return (
        (a_raw << (frac - a_fmt.frac_bits)) + (b_raw << (frac - b_fmt.frac_bits)),
        frac,
    )


def fx_add(a, b, out_fmt: QFormat | None = None, ctx: RunContext | None = None):
    """Exact raw addition (binary points aligned), requantized to ``out_fmt``."""
    return _binary_op(a, b, out_fmt, ctx, _aligned_sum)


def fx_sub(a, b, out_fmt: QFormat | None = None, ctx: RunContext | None = None):
    return _binary_op(
        a, b, out_fmt, ctx,
        lambda ar, af, br, bf: _aligned_sum(ar, af, -br, bf),
    )


def fx_mul(a, b, out_fmt: QFormat | None = None, ctx: RunContext | None = None):
    """Exact raw product (fractions add), requantized once to ``out_fmt``."""
    return _binary_op(
        a, b, out_fmt, ctx,
        lambda ar, af, br, bf: (ar * br, af.frac_bits + bf.frac_bits),
    )


def exact_matmul(a_raw: np.ndarray, b_raw: np.ndarray) -> np.ndarray:
    """Integer matrix product of raws, exact for arbitrary magnitudes.

    Uses the int64 BLAS-free matmul when every partial sum provably fits in
    63 bits; otherwise falls back to arbitrary-precision Python integers so
    results never silently wrap in the accumulator.
    """
    inner = a_raw.shape[-1]
    a_max = int(np.max(np.abs(a_raw))) if a_raw.size else 0
    b_max = int(np.max(np.abs(b_raw))) if b_raw.size else 0
    if a_max * b_max * max(inner, 1) < (1 << 62):
        return a_raw @ b_raw
    wide = a_raw.astype(object) @ b_raw.astype(object)
    return wide  # object array of Python ints; callers requantize elementwise


@dataclass(frozen=True)
class FormatCatalog:
    """The model's working formats.

    Activations are 32-bit signed with 10 integer bits; weights are 16-bit
    signed with per-tensor integer bits (``weight_format``).  Attention-side
    biases carry 7 integer bits, MLP/expert biases 5; both convert losslessly
    into the single widened 19-bit bias type used by the shared linear
    kernel.  GELU correction-table entries are 22 unsigned fractional bits.
    """

    activation: QFormat = QFormat(32, 10)
    weight: QFormat = QFormat(16, 0)
    bias_attention: QFormat = QFormat(16, 7)
    bias_mlp: QFormat = QFormat(16, 5)
    bias_widened: QFormat = QFormat(19, 7)
    gelu_lut_entry: QFormat = QFormat(
        22, 0, signed=False, rounding=Rounding.NEAREST_EVEN
    )

    def __post_init__(self) -> None:
        ba, bm, bw = self.bias_attention, self.bias_mlp, self.bias_widened
        if bw.int_bits != max(ba.int_bits, bm.int_bits):
            raise ValueError("widened bias must cover both bias ranges")
        if bw.frac_bits < max(ba.frac_bits, bm.frac_bits):
            raise ValueError("widened bias must cover both bias precisions")

    def weight_format(self, int_bits: int) -> QFormat:
        return replace(self.weight, int_bits=int_bits)

    def weight_format_for(self, values: np.ndarray) -> QFormat:
        """Smallest-int-bits 16-bit weight format covering ``values``."""
        peak = float(np.max(np.abs(values))) if values.size else 0.0
        int_bits = 0
        while peak > (2.0 ** int_bits) - 2.0 ** -(self.weight.width_bits - 1 - int_bits):
            int_bits += 1
        return self.weight_format(int_bits)
