"""int8 kernel checks against quantize(float-oracle) and exact-commute rules."""

import numpy as np
import pytest

from edgedr import ops
from edgedr.tensor import QuantParams, Tensor

import kernel_cases


@pytest.mark.parametrize("kernel", sorted(kernel_cases.ALL_CASES))
def test_kernel_within_one_unit(kernel):
    worst_f32, worst_units = kernel_cases.run_cases(kernel, count=40, seed=99)
    assert worst_f32 < 1e-5
    limit = 0 if kernel in kernel_cases.EXACT_I8_KERNELS else 1
    assert worst_units <= limit, f"{kernel}: {worst_units} units"


class TestI8Relu:
    def test_clamps_at_zero_point(self):
        qp = QuantParams(0.1, -10)
        x = Tensor((1, 1, 1, 4), "i8", np.array([-50, -10, -9, 100], np.int8), qp)
        out = ops.relu(x)
        assert out.data.reshape(-1).tolist() == [-10, -10, -9, 100]
        assert out.qparams == qp

    def test_all_nonnegative_region_untouched(self):
        qp = QuantParams(1.0, -128)
        x = Tensor((1, 1, 1, 2), "i8", np.array([-128, -100], np.int8), qp)
        assert ops.relu(x).data.reshape(-1).tolist() == [-128, -100]

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        qp = QuantParams(0.05, 3)
        x = Tensor((1, 2, 2, 3), "i8", rng.integers(-128, 128, (1, 2, 2, 3), dtype=np.int8), qp)
        once = ops.relu(x)
        assert np.array_equal(ops.relu(once).data, once.data)


class TestI8PoolPreservesQuantization:
    def test_maxpool_keeps_qparams_and_needs_no_requant(self):
        rng = np.random.default_rng(2)
        qp = QuantParams(0.02, -7)
        x = Tensor((1, 4, 4, 2), "i8", rng.integers(-128, 128, (1, 4, 4, 2), dtype=np.int8), qp)
        out = ops.maxpool2d(x, (2, 2), (2, 2))
        assert out.dtype == "i8" and out.qparams == qp

    def test_gap_requires_output_qparams(self):
        qp = QuantParams(0.02, 0)
        x = Tensor((1, 2, 2, 1), "i8", np.zeros((1, 2, 2, 1), np.int8), qp)
        with pytest.raises(ValueError, match="quantization"):
            ops.global_avg_pool(x)


class TestI8Conv:
    def test_rejects_f32_bias(self):
        rng = np.random.default_rng(3)
        qp = QuantParams(0.02, 0)
        x = Tensor((1, 3, 3, 1), "i8", rng.integers(-10, 10, (1, 3, 3, 1), dtype=np.int8), qp)
        w = Tensor((1, 1, 1, 1), "i8", np.ones((1, 1, 1, 1), np.int8), QuantParams(0.01, 0))
        bias = Tensor.from_array(np.zeros(1, np.float32))
        with pytest.raises(ValueError, match="i32"):
            ops.conv2d(x, w, bias, ops.ConvAttrs((1, 1), (1, 1), "valid", 1, 1), qp)

    def test_dequantizing_head_emits_f32(self):
        rng = np.random.default_rng(4)
        qp = QuantParams(0.05, 3)
        x = Tensor((1, 1, 1, 4), "i8", rng.integers(-20, 20, (1, 1, 1, 4), dtype=np.int8), qp)
        w = Tensor((4, 2), "i8", rng.integers(-30, 30, (4, 2), dtype=np.int8), QuantParams(0.01, 0))
        b = Tensor((2,), "i32", np.array([5, -5], np.int32), None)
        out = ops.dense(x, w, b, out_qparams=None)
        assert out.dtype == "f32"
        acc = (x.data.reshape(4).astype(np.int64) - 3) @ w.data.astype(np.int64) + b.data
        expected = acc.astype(np.float64) * (0.05 * 0.01)
        assert np.allclose(out.data.reshape(-1), expected, rtol=1e-6)
