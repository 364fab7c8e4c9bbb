from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fxmoe.context import RunContext
from fxmoe.fixedpoint import (
    FormatCatalog,
    FxTensor,
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

ACT = FormatCatalog().activation
SAT16_7 = QFormat(16, 7, overflow=Overflow.SATURATE)


class TestQFormat:
    def test_activation_layout(self):
        assert ACT.width_bits == 32 and ACT.int_bits == 10
        assert ACT.frac_bits == 21
        assert ACT.min_value == -1024.0
        assert ACT.max_value == 1024.0 - 2.0 ** -21

    def test_signed_range_is_twos_complement(self):
        f = QFormat(16, 7)
        assert f.raw_min == -(1 << 15) and f.raw_max == (1 << 15) - 1
        assert f.min_value == -128.0
        assert f.max_value == 128.0 - 2.0 ** -8

    def test_unsigned_format(self):
        f = QFormat(22, 0, signed=False)
        assert f.frac_bits == 22
        assert f.raw_min == 0 and f.raw_max == (1 << 22) - 1

    def test_invalid_formats_rejected(self):
        with pytest.raises(ValueError):
            QFormat(8, 8)  # no room for the sign bit
        with pytest.raises(ValueError):
            QFormat(0, 0)
        with pytest.raises(ValueError):
            QFormat(4, -1)


class TestQuantize:
    def test_zero(self):
        assert quantize(0.0, ACT).raw == 0

    def test_one_is_exact_power_of_two_scaling(self):
        assert quantize(1.0, ACT).raw == 1 << 21

    def test_exp7_saturates_16bit_7int(self, ctx):
        v = quantize(1096.63, SAT16_7)
        assert v.raw == SAT16_7.raw_max
        assert v.value == 128.0 - 2.0 ** -8
        assert ctx.overflow_events == 1

    def test_truncation_matches_big_integer_oracle(self):
        # floor(0.3 * 2^21) computed in exact rational arithmetic
        expected = (Fraction(3, 10) * 2 ** 21).__floor__()
        assert expected == 629145
        v = quantize(0.3, ACT)
        assert v.raw == expected
        assert v.value == 629145 * 2.0 ** -21

    def test_round_trip_within_one_ulp(self, rng):
        xs = rng.uniform(-1000, 1000, size=512)
        raws = FxTensor.from_real(xs, ACT)
        assert np.all(np.abs(dequantize(raws) - xs) < ACT.ulp)

    def test_wrap_period_is_full_span(self, rng):
        xs = rng.uniform(-1024, 1024, size=64)
        a = FxTensor.from_real(xs, ACT)
        b = FxTensor.from_real(xs + 2.0 ** (ACT.int_bits + 1), ACT)
        assert np.array_equal(a.raw, b.raw)

    @given(
        st.floats(min_value=-127.9, max_value=127.9),
        st.floats(min_value=-127.9, max_value=127.9),
    )
    def test_monotone_nondecreasing(self, x, y):
        lo, hi = min(x, y), max(x, y)
        assert quantize(lo, SAT16_7).raw <= quantize(hi, SAT16_7).raw

    def test_nearest_even_ties(self):
        f = QFormat(16, 7, rounding=Rounding.NEAREST_EVEN)
        half_ulp = 2.0 ** -9
        assert quantize(2 * half_ulp + half_ulp, f).raw == 2  # 1.5 ulp -> 2
        assert quantize(half_ulp, f).raw == 0  # 0.5 ulp -> 0
        assert quantize(-half_ulp, f).raw == 0


class TestRequantize:
    def test_attention_bias_widens_losslessly(self, catalog):
        v = quantize(63.5, catalog.bias_attention)
        w = requantize(v, catalog.bias_widened)
        assert dequantize(w) == 63.5

    def test_mlp_bias_ulp_widens_losslessly(self, catalog):
        one_ulp = quantize(catalog.bias_mlp.ulp, catalog.bias_mlp)
        assert one_ulp.raw == 1
        w = requantize(one_ulp, catalog.bias_widened)
        assert dequantize(w) == catalog.bias_mlp.ulp

    def test_widened_saturates_into_mlp_bias(self, catalog, ctx):
        target = catalog.bias_mlp.with_policies(overflow=Overflow.SATURATE)
        v = quantize(100.0, catalog.bias_widened)
        narrowed = requantize(v, target)
        assert dequantize(narrowed) == 2.0 ** 5 - 2.0 ** -10
        assert ctx.overflow_events == 1

    @given(st.integers(min_value=-(1 << 15), max_value=(1 << 15) - 1))
    def test_widen_then_narrow_is_identity(self, raw):
        from fxmoe.fixedpoint import FxValue

        catalog = FormatCatalog()
        for fmt in (catalog.bias_attention, catalog.bias_mlp):
            v = FxValue(raw, fmt)
            back = requantize(requantize(v, catalog.bias_widened), fmt)
            assert back.raw == raw


class TestArithmetic:
    def test_add_and_mul_are_deterministic(self, rng):
        a = FxTensor.from_real(rng.uniform(-10, 10, 128), ACT)
        b = FxTensor.from_real(rng.uniform(-10, 10, 128), ACT)
        s1, s2 = fx_add(a, b), fx_add(a, b)
        p1, p2 = fx_mul(a, b), fx_mul(a, b)
        assert np.array_equal(s1.raw, s2.raw)
        assert np.array_equal(p1.raw, p2.raw)

    def test_add_of_same_format_is_exact_integer_add(self):
        a = quantize(1.25, ACT)
        b = quantize(2.5, ACT)
        assert fx_add(a, b).raw == a.raw + b.raw

    def test_mul_truncates_product_toward_neg_inf(self):
        a = quantize(0.3, ACT)
        b = quantize(0.7, ACT)
        expected = (a.raw * b.raw) >> 21
        assert fx_mul(a, b).raw == expected

    def test_sub_mixed_formats_aligns_binary_points(self, catalog):
        a = quantize(3.5, catalog.bias_attention)  # 8 frac bits
        b = quantize(1.25, catalog.bias_mlp)  # 10 frac bits
        d = fx_sub(a, b, out_fmt=catalog.bias_widened)
        assert dequantize(d) == 2.25


class TestFormatCatalog:
    def test_widened_covers_both_bias_formats(self, catalog):
        bw = catalog.bias_widened
        assert bw.int_bits == max(
            catalog.bias_attention.int_bits, catalog.bias_mlp.int_bits
        )
        assert bw.frac_bits >= max(
            catalog.bias_attention.frac_bits, catalog.bias_mlp.frac_bits
        )
        assert bw.width_bits == 19 and bw.frac_bits == 11

    def test_gelu_entry_format(self, catalog):
        f = catalog.gelu_lut_entry
        assert not f.signed and f.width_bits == 22 and f.frac_bits == 22

    def test_weight_format_for_picks_minimal_int_bits(self, catalog):
        assert catalog.weight_format_for(np.array([0.4, -0.2])).int_bits == 0
        assert catalog.weight_format_for(np.array([1.5])).int_bits == 1
        assert catalog.weight_format_for(np.array([100.0])).int_bits == 7
        # max magnitude exactly at the positive format edge still fits
        edge = 2.0 - 2.0 ** -14
        assert catalog.weight_format_for(np.array([edge])).int_bits == 1

    def test_inconsistent_catalog_rejected(self):
        with pytest.raises(ValueError):
            FormatCatalog(bias_widened=QFormat(17, 7))  # only 9 frac bits


class TestRunContext:
    def test_events_count_on_active_context_only(self):
        with RunContext() as outer:
            quantize(1e6, ACT)
            with RunContext() as inner:
                quantize(1e6, ACT)
                quantize(-1e6, ACT)
            assert inner.overflow_events == 2
        assert outer.overflow_events == 1

    def test_stage_attribution(self):
        with RunContext() as c:
            with c.stage_scope("qk", block=0) as st:
                quantize(1e6, ACT)
            quantize(1e6, ACT)
        assert st.overflow_events == 1
        assert c.overflow_events == 2

    def test_in_range_values_record_nothing(self, ctx, rng):
        FxTensor.from_real(rng.uniform(-1023, 1023, 1024), ACT)
        assert ctx.overflow_events == 0
