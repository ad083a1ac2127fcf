import math

import numpy as np
import pytest

from edgedr.tensor import (
    QuantParams,
    RangeObservation,
    Tensor,
    apply_requant,
    dequantize,
    observe,
    qparams_from_range,
    quantize,
    requant_multiplier,
    round_half_away,
)

from oracles import quantize_ref


def f32(values, shape=None):
    arr = np.asarray(values, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim == 1:
        arr = arr.reshape(1, 1, 1, -1)
    return Tensor.from_array(arr)


class TestTensorInvariants:
    def test_data_length_must_match_shape(self):
        with pytest.raises(ValueError, match="elements"):
            Tensor((1, 2, 2, 3), "f32", np.zeros(5, dtype=np.float32))

    def test_i8_requires_qparams(self):
        with pytest.raises(ValueError, match="quantization"):
            Tensor((1, 1, 1, 2), "i8", np.zeros(2, dtype=np.int8))

    def test_f32_rejects_qparams(self):
        with pytest.raises(ValueError):
            Tensor((1, 1, 1, 2), "f32", np.zeros(2, dtype=np.float32), QuantParams(1.0, 0))

    def test_buffer_is_read_only(self):
        t = f32([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0, 0, 0, 0] = 5.0


class TestQuantize:
    def test_formula_with_clamp(self):
        q = quantize(f32([1.0, 0.0, 100.0]), QuantParams(0.5, 0))
        assert q.data.reshape(-1).tolist() == [2, 0, 127]

    def test_affine_identity(self):
        q = quantize(f32([5.0]), QuantParams(1.0, 10))
        assert q.data.reshape(-1).tolist() == [15]

    def test_nonfinite_rejected_with_flat_index(self):
        bad = np.array([1.0, 2.0, np.inf, 3.0], dtype=np.float32)
        with pytest.raises(ValueError, match="flat index 2"):
            quantize(f32(bad), QuantParams(1.0, 0))

    def test_round_trip_within_half_scale(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-4.0, 4.0, (1, 4, 4, 3)).astype(np.float32)
        qp = qparams_from_range(float(x.min()), float(x.max()))
        back = dequantize(quantize(Tensor.from_array(x), qp))
        assert np.abs(back.data - x).max() <= qp.scale / 2 + 1e-6

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            x = rng.uniform(-6, 6, (1, 2, 3, 2)).astype(np.float32)
            qp = QuantParams(float(rng.uniform(0.01, 0.5)), int(rng.integers(-100, 100)))
            got = quantize(Tensor.from_array(x), qp).data.astype(np.int64)
            ref = quantize_ref(x.astype(np.float64), qp.scale, qp.zero_point)
            assert np.array_equal(got, ref)


class TestDequantize:
    def test_inverse_affine(self):
        t = Tensor((1, 1, 1, 1), "i8", np.array([2], dtype=np.int8), QuantParams(0.5, 0))
        assert dequantize(t).data.reshape(-1).tolist() == [1.0]

    def test_zero_point_maps_to_zero(self):
        t = Tensor((1, 1, 1, 1), "i8", np.array([-128], dtype=np.int8), QuantParams(1.0, -128))
        assert dequantize(t).data.reshape(-1).tolist() == [0.0]

    def test_quantize_after_dequantize_is_identity(self):
        rng = np.random.default_rng(11)
        codes = rng.integers(-128, 128, (1, 3, 3, 2), dtype=np.int8)
        qp = QuantParams(0.037, -5)
        t = Tensor(codes.shape, "i8", codes, qp)
        again = quantize(dequantize(t), qp)
        assert np.array_equal(again.data, codes)

    def test_missing_qparams_rejected(self):
        with pytest.raises(ValueError):
            dequantize(f32([1.0]))


class TestRangeObservation:
    def test_observe_single_tensor(self):
        obs = observe(f32([-1.0, 2.0]))
        assert (obs.min, obs.max, obs.count) == (-1.0, 2.0, 2)

    def test_merge_elementwise(self):
        a = RangeObservation(-1, 2, 4)
        b = RangeObservation(-3, 1, 2)
        m = a.merge(b)
        assert (m.min, m.max, m.count) == (-3, 2, 6)

    def test_order_independent_over_shuffled_stream(self):
        rng = np.random.default_rng(5)
        chunks = [rng.normal(size=(1, 2, 2, 3)).astype(np.float32) for _ in range(8)]
        forward = RangeObservation()
        for c in chunks:
            forward = observe(Tensor.from_array(c), forward)
        backward = RangeObservation()
        for c in reversed(chunks):
            backward = observe(Tensor.from_array(c), backward)
        assert forward == backward

    def test_merge_associative_commutative_over_partitions(self):
        rng = np.random.default_rng(9)
        parts = [
            RangeObservation(float(lo), float(lo + abs(hi)), int(n))
            for lo, hi, n in rng.uniform(-5, 5, (30, 3))
        ]
        left = parts[0]
        for p in parts[1:]:
            left = left.merge(p)
        right = parts[-1]
        for p in reversed(parts[:-1]):
            right = p.merge(right)
        assert left == right
        shuffled = list(parts)
        rng.shuffle(shuffled)
        acc = RangeObservation()
        for p in shuffled:
            acc = acc.merge(p)
        assert acc == left


class TestQparamsFromRange:
    def test_asymmetric_formula(self):
        qp = qparams_from_range(0.0, 2.55)
        assert qp.scale == pytest.approx(0.01)
        assert qp.zero_point == -128

    def test_symmetric_formula(self):
        qp = qparams_from_range(-2.0, 2.0, symmetric=True)
        assert qp.scale == pytest.approx(2 / 127)
        assert qp.zero_point == 0

    def test_degenerate_zero_range(self):
        assert qparams_from_range(0.0, 0.0) == QuantParams(1.0, 0)

    def test_range_widened_to_include_zero(self):
        qp = qparams_from_range(1.0, 3.0)
        # widened to [0, 3]: code for real 0 must be exact
        assert dequantize(
            Tensor((1, 1, 1, 1), "i8", np.array([qp.zero_point], np.int8), qp)
        ).data.reshape(-1)[0] == 0.0

    def test_zero_always_representable(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            lo, hi = np.sort(rng.uniform(-50, 50, 2))
            for symmetric in (False, True):
                qp = qparams_from_range(float(lo), float(hi), symmetric)
                code = round_half_away(np.array([0.0]) / qp.scale) + qp.zero_point
                assert -128 <= code[0] <= 127
                assert (code[0] - qp.zero_point) * qp.scale == 0.0

    def test_nonfinite_bounds_rejected(self):
        with pytest.raises(ValueError):
            qparams_from_range(-math.inf, 1.0)


class TestRequantMultiplier:
    def test_exact_powers_of_two(self):
        assert requant_multiplier(0.5, 1.0, 1.0) == (1 << 30, 0)
        assert requant_multiplier(0.25, 1.0, 1.0) == (1 << 30, 1)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            requant_multiplier(1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            requant_multiplier(2.0, 1.0, 1.0)

    def test_random_relative_error_bound(self):
        rng = np.random.default_rng(17)
        for _ in range(500):
            m = float(rng.uniform(1e-9, 1.0 - 1e-12))
            mant, shift = requant_multiplier(m, 1.0, 1.0)
            assert (1 << 30) <= mant < (1 << 31)
            reconstructed = mant * 2.0 ** (-31 - shift)
            assert abs(reconstructed - m) / m <= 2**-30

    def test_fixed_point_rescale_within_one_unit_of_exact(self):
        rng = np.random.default_rng(19)
        for _ in range(100):
            m = float(rng.uniform(1e-6, 0.999))
            mant, shift = requant_multiplier(m, 1.0, 1.0)
            acc = rng.integers(-(2**30), 2**30, size=64, dtype=np.int64)
            got = apply_requant(acc, mant, shift)
            exact = round_half_away(acc.astype(np.float64) * m)
            assert np.abs(got - exact).max() <= 1


class TestApplyRequant:
    def test_half_away_from_zero_both_signs(self):
        # 3 * 2^30 * 2^-31 = 1.5 -> 2; negative mirror -> -2
        mant, shift = 1 << 30, 0
        acc = np.array([3, -3, 1, -1, 0], dtype=np.int64)
        assert apply_requant(acc, mant, shift).tolist() == [2, -2, 1, -1, 0]

    def test_huge_shift_underflows_to_zero(self):
        acc = np.array([2**30], dtype=np.int64)
        assert apply_requant(acc, 1 << 30, 40).tolist() == [0]
