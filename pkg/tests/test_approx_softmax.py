import math

import numpy as np
import pytest

from fxmoe.context import RunContext
from fxmoe.approx import (
    SoftmaxState,
    build_row_states,
    fx_exp,
    finalize_rows,
    softmax_finalize,
    softmax_stream,
    softmax_stream_update,
    softmax_three_pass,
)
from fxmoe.fixedpoint import FormatCatalog, FxTensor, Overflow, quantize

ACT = FormatCatalog().activation


class TestFxExp:
    def test_exp_zero_is_exactly_one(self):
        assert fx_exp(quantize(0.0, ACT)).value == 1.0

    def test_exp_seven_overflows_ten_int_bits(self):
        # e^7 ~ 1096.63 needs 12 integer bits; 10 bits saturate at the max
        sat = ACT.with_policies(overflow=Overflow.SATURATE)
        with RunContext() as ctx:
            v = fx_exp(quantize(7.0, sat), out_fmt=sat)
        assert v.raw == sat.raw_max
        assert ctx.overflow_events == 1
        assert math.exp(7.0) > sat.max_value

    def test_exp_small_negative_matches_oracle(self):
        v = fx_exp(quantize(-0.1, ACT))
        assert abs(v.value - math.exp(-0.1)) < 2.0 ** -20

    def test_vector_exp_matches_scalar_exp_bitwise(self, rng):
        xs = FxTensor.from_real(rng.uniform(-14, 0, 257), ACT)
        vec = fx_exp(xs)
        for i in range(xs.raw.size):
            assert vec.raw[i] == fx_exp(xs.item(i)).raw


def _stream_states(values):
    state = SoftmaxState(fmt=ACT)
    states = []
    for v in values:
        state = softmax_stream_update(state, quantize(v, ACT))
        states.append(state)
    return states


class TestStreamingUpdate:
    def test_first_element_sets_bias_and_unit_sum(self):
        (st,) = _stream_states([0.2])
        assert st.b.value == quantize(0.2, ACT).value
        assert st.s.value == 1.0

    def test_second_element_below_bias_accumulates(self):
        sts = _stream_states([0.2, 0.1])
        expected = 1.0 + math.exp(
            quantize(0.1, ACT).value - quantize(0.2, ACT).value
        )
        assert sts[-1].b_raw == quantize(0.2, ACT).raw
        assert abs(sts[-1].s.value - expected) < 1e-6

    def test_new_maximum_rescales_running_sum(self):
        sts = _stream_states([0.2, 0.1, 0.3])
        q = lambda v: quantize(v, ACT).value
        s2 = 1.0 + math.exp(q(0.1) - q(0.2))
        expected = s2 * math.exp(q(0.2) - q(0.3)) + 1.0
        assert sts[-1].b_raw == quantize(0.3, ACT).raw
        assert abs(sts[-1].s.value - expected) < 1e-6
        # the rescale telescopes exactly: sum equals terms against the final bias
        direct = sum(math.exp(q(v) - q(0.3)) for v in (0.2, 0.1, 0.3))
        assert abs(sts[-1].s.value - direct) < 1e-6

    def test_exp_arguments_never_positive(self, rng):
        state = SoftmaxState(fmt=ACT)
        for v in rng.uniform(-1024, 1023, 64):
            x = quantize(v, ACT)
            b_before = state.b_raw if state.b_raw is not None else ACT.raw_min
            state = softmax_stream_update(state, x)
            if x.raw > b_before:
                assert b_before - x.raw <= 0
            else:
                assert x.raw - b_before <= 0


class TestFinalize:
    def test_singleton_softmax_is_one(self):
        (st,) = _stream_states([3.25])
        assert softmax_finalize(quantize(3.25, ACT), st).value == 1.0

    def test_three_element_output_matches_float_oracle(self):
        sts = _stream_states([0.2, 0.1, 0.3])
        q = lambda v: quantize(v, ACT).value
        s = sum(math.exp(q(v) - q(0.3)) for v in (0.2, 0.1, 0.3))
        out = softmax_finalize(quantize(0.3, ACT), sts[-1])
        assert abs(out.value - 1.0 / s) < 1e-5
        assert abs(out.value - 0.367154) < 5e-5

    def test_uniform_inputs_give_uniform_outputs(self):
        for n in (1, 7, 64, 256):
            xs = FxTensor.from_real(np.full(n, 0.375), ACT)
            out, _ = softmax_stream(xs)
            assert np.all(np.abs(out.to_real() - 1.0 / n) <= n * 2.0 ** -20)

    def test_empty_state_rejected(self):
        with pytest.raises(ZeroDivisionError):
            softmax_finalize(quantize(0.0, ACT), SoftmaxState(fmt=ACT))


class TestThreePassEquivalence:
    def test_worked_sequence_bitwise(self):
        xs = FxTensor.from_real([0.2, 0.1, 0.3], ACT)
        out_s, st_s = softmax_stream(xs)
        out_t, st_t = softmax_three_pass(xs)
        assert (st_s.b_raw, st_s.s.raw) == (st_t.b_raw, st_t.s.raw)
        assert np.array_equal(out_s.raw, out_t.raw)

    def test_random_vectors_bitwise_and_normalized(self, rng):
        with RunContext() as ctx:
            for _ in range(500):
                n = int(rng.integers(1, 257))
                xs = FxTensor.from_real(
                    rng.uniform(ACT.min_value, ACT.max_value, n), ACT
                )
                out_s, st_s = softmax_stream(xs)
                out_t, st_t = softmax_three_pass(xs)
                assert st_s.b_raw == st_t.b_raw
                assert st_s.s.raw == st_t.s.raw
                assert np.array_equal(out_s.raw, out_t.raw)
                total = out_s.to_real().sum()
                assert abs(total - 1.0) <= n * 2.0 ** -20
        assert ctx.overflow_events == 0

    def test_extreme_spread_yields_one_hot_without_overflow(self):
        with RunContext() as ctx:
            xs = FxTensor.from_real([100.0, 0.0], ACT)
            out, _ = softmax_stream(xs)
            assert out.to_real()[0] == 1.0
            assert out.to_real()[1] == 0.0
        assert ctx.overflow_events == 0

    def test_permutations_share_bias_and_nearly_share_sum(self, rng):
        base = rng.uniform(-5, 5, 33)
        xs = FxTensor.from_real(base, ACT)
        _, st_ref = softmax_stream(xs)
        for _ in range(8):
            perm = FxTensor(rng.permutation(xs.raw), ACT)
            _, st_p = softmax_stream(perm)
            assert st_p.b_raw == st_ref.b_raw
            assert abs(st_p.s.raw - st_ref.s.raw) <= 2

    def test_empty_vector_rejected(self):
        with pytest.raises(ValueError):
            softmax_three_pass(FxTensor.from_real([], ACT))
        with pytest.raises(ValueError):
            softmax_stream(FxTensor.from_real([], ACT))


class TestRowStates:
    def test_row_builder_matches_scalar_streaming_bitwise(self, rng):
        scores = FxTensor.from_real(rng.uniform(-20, 20, (17, 64)), ACT)
        b, s_raw, _ = build_row_states(scores.raw, ACT)
        for r in range(scores.shape[0]):
            state = SoftmaxState(fmt=ACT)
            for j in range(scores.shape[1]):
                state = softmax_stream_update(state, int(scores.raw[r, j]))
            assert b[r] == state.b_raw
            assert s_raw[r] == state.s.raw

    def test_finalize_rows_matches_scalar(self, rng):
        scores = FxTensor.from_real(rng.uniform(-3, 3, (5, 41)), ACT)
        b, s_raw, s_acc = build_row_states(scores.raw, ACT)
        outs = finalize_rows(scores.raw, b, s_raw, ACT)
        for r in range(5):
            state = SoftmaxState(fmt=ACT, b_raw=int(b[r]), s_acc=float(s_acc[r]))
            for j in (0, 17, 40):
                assert outs[r, j] == softmax_finalize(
                    scores.item(r, j), state
                ).raw
