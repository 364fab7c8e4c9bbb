"""One configurable linear kernel serving every layer shape in the model.

The same compute path handles dense and sparse (token-indexed) inputs,
optional fused GELU on the writer side, and optional gate-weighted
accumulation onto an existing output buffer.  Weights travel in a blocked
layout with biases pre-widened to the shared bias format; blocking is pure
layout and never changes values.

Products of 16-bit weight raws and 32-bit activation raws are summed in a
64-bit accumulator and requantized to the activation format exactly once per
output element.  For every in-scope layer shape (inner dimension up to a few
thousand) the accumulator provably cannot overflow: |w| < 2**15, |x| < 2**31,
so partial sums stay below 2**46 * in_dim << 2**63.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .approx import GeluTable, build_gelu_table, gelu
from .context import RunContext, current_context
from .fixedpoint import (
    FormatCatalog,
    FxTensor,
    FxValue,
    QFormat,
    _fit_raw,
    _requantize_raw,
    exact_matmul,
    requantize,
)

__all__ = [
    "BiasSource",
    "LinearConfig",
    "BlockedWeights",
    "flatten_indices",
    "pack_blocked_weights",
    "unified_linear",
    "accumulate_wide",
    "default_gelu_table",
]

_CATALOG = FormatCatalog()

BiasSource = str  # "attention" (7 integer bits) or "mlp" (5 integer bits)

_BIAS_FORMATS = {
    "attention": _CATALOG.bias_attention,
    "mlp": _CATALOG.bias_mlp,
}

_DEFAULT_TABLE: GeluTable | None = None


def default_gelu_table() -> GeluTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = build_gelu_table()
    return _DEFAULT_TABLE


@dataclass(frozen=True)
class LinearConfig:
    """Run-time configuration of the shared linear kernel.

    ``token_indices`` of None selects the dense reader (all tokens);
    otherwise only the listed token rows are read and written.  When
    ``accumulate`` holds a scale (one gate weight, or one per selected
    token), the writer adds ``quantize(scale * y)`` onto the existing output
    row instead of overwriting it.
    """

    in_dim: int
    out_dim: int
    token_indices: np.ndarray | None = None
    apply_gelu: bool = False
    accumulate: FxValue | FxTensor | None = None
    bias_source: BiasSource = "attention"

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("linear dimensions must be >= 1")
        if self.bias_source not in _BIAS_FORMATS:
            raise ValueError(f"unknown bias source {self.bias_source!r}")
        if self.token_indices is not None:
            idx = np.asarray(self.token_indices, dtype=np.int64)
            if idx.ndim != 1:
                raise ValueError("token index list must be one-dimensional")
            if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
                raise ValueError("token indices must be strictly ascending and nonnegative")
            object.__setattr__(self, "token_indices", idx)

    @property
    def bias_format(self) -> QFormat:
        return _BIAS_FORMATS[self.bias_source]


def flatten_indices(out_dim: int, in_dim: int) -> Iterator[tuple[int, int]]:
    """Lexicographic (i, j) pairs via manual register updates.

    Emits exactly ``out_dim * in_dim`` pairs using only increment/compare
    steps, the single-pipeline replacement for a variable-bound nested loop.
    """
    if out_dim < 1 or in_dim < 1:
        raise ValueError("dimensions must be >= 1")
    i = 0
    j = 0
    for _ in range(out_dim * in_dim):
        yield (i, j)
        if j == in_dim - 1:
            j = 0
            i += 1
        else:
            j += 1


@dataclass(frozen=True)
class BlockedWeights:
    """Weights grouped into fixed-size compute blocks plus widened biases.

    ``blocks`` is the row-major weight sequence split into rows of
    ``block_size`` raws (zero-padded at the tail); ``count`` raws are
    meaningful.  Unblocking reproduces the original sequence exactly.
    """

    blocks: np.ndarray  # [n_blocks, block_size] int64 raws
    count: int
    block_size: int
    out_dim: int
    in_dim: int
    weight_fmt: QFormat
    bias_raw: np.ndarray  # [out_dim] raws in bias_widened
    bias_fmt: QFormat

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[0]

    @property
    def total_blocks(self) -> int:
        """Weight blocks plus bias blocks, the unit of weight-stream traffic."""
        return self.n_blocks + -(-self.out_dim // self.block_size)

    def unblock(self) -> np.ndarray:
        return self.blocks.reshape(-1)[: self.count]

    def matrix(self) -> np.ndarray:
        return self.unblock().reshape(self.out_dim, self.in_dim)


def pack_blocked_weights(
    weights: FxTensor,
    biases: FxTensor,
    cfg: LinearConfig,
    block_size: int = 8,
) -> BlockedWeights:
    """Block the row-major weight sequence and widen the biases.

    ``weights`` may be [out, in] or the flat row-major sequence; ``biases``
    must be [out] in the config's source bias format and convert losslessly
    into the widened type.
    """
    seq = weights.raw.reshape(-1)
    if seq.size != cfg.out_dim * cfg.in_dim:
        raise ValueError(
            f"weight sequence has {seq.size} values, expected "
            f"{cfg.out_dim}x{cfg.in_dim}"
        )
    if biases.raw.shape != (cfg.out_dim,):
        raise ValueError(f"bias shape {biases.raw.shape} != ({cfg.out_dim},)")
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    n_blocks = -(-seq.size // block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.int64)
    padded[: seq.size] = seq
    widened = requantize(biases, _CATALOG.bias_widened)
    return BlockedWeights(
        blocks=padded.reshape(n_blocks, block_size),
        count=int(seq.size),
        block_size=block_size,
        out_dim=cfg.out_dim,
        in_dim=cfg.in_dim,
        weight_fmt=weights.fmt,
        bias_raw=widened.raw,
        bias_fmt=widened.fmt,
    )


def accumulate_wide(x_raw: np.ndarray, w: BlockedWeights, act_fmt: QFormat):
    """The pre-quantization accumulator: raw products summed in 64 bits with
    the bias aligned into the accumulator's binary point.

    Returns ``(acc, acc_frac_bits)``.
    """
    w_mat = w.matrix()
    acc = exact_matmul(x_raw, w_mat.T)
    acc_frac = act_fmt.frac_bits + w.weight_fmt.frac_bits
    acc = acc + (w.bias_raw.astype(acc.dtype) << (acc_frac - w.bias_fmt.frac_bits))
    return acc, acc_frac


def unified_linear(
    x: FxTensor,
    w: BlockedWeights,
    cfg: LinearConfig,
    out: FxTensor | None = None,
    gelu_table: GeluTable | None = None,
    ctx: RunContext | None = None,
) -> FxTensor:
    """``y[t, i] = sum_j w[i, j] * x[t, j] + bias[i]`` over selected tokens.

    Dense mode processes every token row; sparse mode only the configured
    indices, leaving other output rows untouched.  The fused GELU flag
    applies the table kernel before the writer runs; accumulate mode scales
    each written row by its gate weight, quantizes, and adds it onto ``out``.
    """
    ctx = ctx or current_context()
    if x.raw.ndim == 1:
        x = FxTensor(x.raw[np.newaxis, :], x.fmt)
    n_tokens, in_dim = x.raw.shape
    if in_dim != cfg.in_dim or (w.out_dim, w.in_dim) != (cfg.out_dim, cfg.in_dim):
        raise ValueError(
            f"shape mismatch: input [{n_tokens}x{in_dim}], weights "
            f"[{w.out_dim}x{w.in_dim}], config {cfg.out_dim}x{cfg.in_dim}"
        )
    act_fmt = x.fmt

    if cfg.token_indices is None:
        sel = None
        x_sel = x.raw
    else:
        sel = cfg.token_indices
        if sel.size and sel[-1] >= n_tokens:
            raise IndexError(
                f"sparse token index {int(sel[-1])} out of range for {n_tokens} tokens"
            )
        x_sel = x.raw[sel]

    acc, acc_frac = accumulate_wide(x_sel, w, act_fmt)
    y_raw = _requantize_raw(acc, acc_frac, act_fmt, ctx)
    y = FxTensor(np.asarray(y_raw, dtype=np.int64), act_fmt)

    if cfg.apply_gelu:
        y = gelu(y, gelu_table or default_gelu_table(), ctx)

    ctx.bump(
        mac_count=int(x_sel.shape[0]) * cfg.out_dim * cfg.in_dim,
        blocks_loaded=w.total_blocks,
    )

    if cfg.accumulate is not None:
        if out is None:
            out = FxTensor.zeros((n_tokens, cfg.out_dim), act_fmt)
        scale = cfg.accumulate
        if isinstance(scale, FxValue):
            s_raw = np.asarray([scale.raw], dtype=np.int64)
            s_frac = scale.fmt.frac_bits
        else:
            s_raw = scale.raw.reshape(-1)
            s_frac = scale.fmt.frac_bits
            if sel is not None and s_raw.size != x_sel.shape[0]:
                raise ValueError("one accumulate scale per selected token required")
        scaled = _requantize_raw(y.raw * s_raw[:, None], s_frac + act_fmt.frac_bits,
                                 act_fmt, ctx)
        target = out.raw if sel is None else out.raw[sel]
        summed = _fit_raw(target + scaled, act_fmt, ctx)
        if sel is None:
            new_raw = summed
        else:
            new_raw = out.raw.copy()
            new_raw[sel] = summed
        return FxTensor(new_raw, act_fmt)

    if out is None:
        if sel is None:
            return y
        buf = FxTensor.zeros((n_tokens, cfg.out_dim), act_fmt)
        new_raw = buf.raw
    else:
        new_raw = out.raw.copy()
    if sel is None:
        new_raw = y.raw
    else:
        new_raw[sel] = y.raw
    return FxTensor(new_raw, act_fmt)
