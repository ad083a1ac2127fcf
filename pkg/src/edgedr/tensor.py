"""NHWC tensors and affine int8 quantization primitives.

Everything else in the package moves data around as :class:`Tensor` values:
dense row-major numpy buffers tagged with a dtype name and, for int8 data,
the affine (scale, zero_point) mapping back to real values.

Conventions fixed here and relied on everywhere:
  - activations are rank-4 NHWC; weights may be rank 1..4,
  - rounding is half-away-from-zero, so int8 results are bit-reproducible,
  - int8 rescaling goes through a (mantissa, right_shift) fixed-point
    multiplier applied to int32 accumulators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DTYPE_TO_NUMPY = {"f32": np.float32, "i8": np.int8, "i32": np.int32}

QMIN = -128
QMAX = 127


@dataclass(frozen=True)
class QuantParams:
    """Affine int8 mapping: real = (code - zero_point) * scale."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero_point {self.zero_point} outside [{QMIN}, {QMAX}]")


@dataclass(frozen=True)
class Tensor:
    """Immutable dense tensor: shape + dtype name + flat row-major buffer.

    Activations are always (n, h, w, c); weight tensors use whatever rank
    the layer needs (conv kernels are (kh, kw, cin_per_group, cout), dense
    kernels (k, m), biases (c,)). The buffer is marked read-only so a
    Tensor can be shared across threads freely.
    """

    shape: tuple
    dtype: str
    data: np.ndarray
    qparams: Optional[QuantParams] = None

    def __post_init__(self):
        if self.dtype not in DTYPE_TO_NUMPY:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if not 1 <= len(self.shape) <= 4 or any(d < 0 for d in self.shape):
            raise ValueError(f"bad shape {self.shape}")
        want = int(np.prod(self.shape)) if self.shape else 1
        if self.data.size != want:
            raise ValueError(
                f"data has {self.data.size} elements, shape {self.shape} needs {want}"
            )
        if self.data.dtype != DTYPE_TO_NUMPY[self.dtype]:
            raise ValueError(f"buffer dtype {self.data.dtype} does not match {self.dtype}")
        if self.dtype == "i8" and self.qparams is None:
            raise ValueError("i8 tensors must carry quantization parameters")
        if self.dtype == "f32" and self.qparams is not None:
            raise ValueError("f32 tensors must not carry quantization parameters")
        arr = np.ascontiguousarray(self.data).reshape(self.shape)
        arr.flags.writeable = False
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "data", arr)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    @staticmethod
    def from_array(arr, qparams: Optional[QuantParams] = None) -> "Tensor":
        arr = np.asarray(arr)
        for name, np_dtype in DTYPE_TO_NUMPY.items():
            if arr.dtype == np_dtype:
                return Tensor(tuple(arr.shape), name, arr, qparams)
        raise ValueError(f"unsupported numpy dtype {arr.dtype}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero (numpy rounds half-to-even)."""
    x = np.asarray(x)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize(t: Tensor, qp: QuantParams) -> Tensor:
    """Map an f32 tensor onto int8 codes under qp, clamping to [-128, 127]."""
    if t.dtype != "f32":
        raise ValueError(f"quantize expects an f32 tensor, got {t.dtype}")
    finite = np.isfinite(t.data)
    if not finite.all():
        idx = int(np.argmin(finite.reshape(-1)))
        raise ValueError(f"non-finite element at flat index {idx}")
    q = round_half_away(t.data.astype(np.float64) / qp.scale) + qp.zero_point
    q = np.clip(q, QMIN, QMAX).astype(np.int8)
    return Tensor(t.shape, "i8", q, qp)


def dequantize(t: Tensor) -> Tensor:
    """Map int8 codes back to real values: (q - zero_point) * scale."""
    if t.dtype != "i8" or t.qparams is None:
        raise ValueError("dequantize expects an i8 tensor with quantization parameters")
    x = (t.data.astype(np.float64) - t.qparams.zero_point) * t.qparams.scale
    return Tensor(t.shape, "f32", x.astype(np.float32))


@dataclass(frozen=True)
class RangeObservation:
    """Running (min, max, count) over observed f32 elements.

    The empty observation is (inf, -inf, 0) so merging needs no special
    cases; merge is associative and commutative, which is what lets
    calibration shard samples across workers.
    """

    min: float = math.inf
    max: float = -math.inf
    count: int = 0

    def __post_init__(self):
        if self.count > 0 and self.min > self.max:
            raise ValueError("min exceeds max on a non-empty observation")

    def merge(self, other: "RangeObservation") -> "RangeObservation":
        return RangeObservation(
            min(self.min, other.min),
            max(self.max, other.max),
            self.count + other.count,
        )


def observe(t: Tensor, acc: RangeObservation = RangeObservation()) -> RangeObservation:
    """Fold a tensor's value range into an accumulated observation."""
    if t.dtype != "f32":
        raise ValueError("observe expects an f32 tensor")
    if t.size == 0:
        return acc
    return acc.merge(
        RangeObservation(float(t.data.min()), float(t.data.max()), int(t.size))
    )


def qparams_from_range(lo: float, hi: float, symmetric: bool = False) -> QuantParams:
    """Turn an observed [lo, hi] value range into int8 affine parameters.

    The range is first widened to include 0 so that real zero is exactly
    representable. A degenerate all-zero range maps to scale 1, zero_point
    0 instead of failing. Scales are snapped to f32 so the in-memory value
    matches what the model file stores.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError(f"range bounds must be finite, got [{lo}, {hi}]")
    if lo > hi:
        raise ValueError(f"empty range [{lo}, {hi}]")
    lo = min(lo, 0.0)
    hi = max(hi, 0.0)
    if lo == 0.0 and hi == 0.0:
        return QuantParams(1.0, 0)
    if symmetric:
        scale = float(np.float32(max(abs(lo), abs(hi)) / QMAX))
        return QuantParams(scale, 0)
    scale = float(np.float32((hi - lo) / (QMAX - QMIN)))
    zp = int(np.clip(round_half_away(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale, zp)


def requant_multiplier(s_in: float, s_w: float, s_out: float) -> tuple:
    """Fixed-point form of the rescale factor M = s_in * s_w / s_out.

    Returns (mantissa, right_shift) with mantissa in [2^30, 2^31) such that
    mantissa * 2^(-31 - right_shift) approximates M to relative error
    <= 2^-30. M outside (0, 1) signals a broken calibration and is
    rejected.
    """
    if s_in <= 0 or s_w <= 0 or s_out <= 0:
        raise ValueError("scales must be positive")
    m = (s_in * s_w) / s_out
    if not (0.0 < m < 1.0):
        raise ValueError(f"rescale factor {m} outside (0, 1)")
    frac, exp = math.frexp(m)  # m = frac * 2^exp, frac in [0.5, 1)
    mantissa = int(round(frac * (1 << 31)))
    right_shift = -exp
    if mantissa == 1 << 31:
        mantissa >>= 1
        right_shift -= 1
    assert (1 << 30) <= mantissa < (1 << 31)
    return mantissa, right_shift


def apply_requant(acc: np.ndarray, mantissa: int, right_shift: int) -> np.ndarray:
    """Rescale an int32 accumulator by mantissa * 2^(-31 - right_shift).

    Pure integer arithmetic with half-away-from-zero rounding, so results
    are bit-identical across platforms. Input magnitudes must stay below
    2^31 (checked by the callers' accumulator asserts).
    """
    acc = acc.astype(np.int64)
    shift = 31 + right_shift
    if shift >= 63:
        # |acc * mantissa| < 2^62, so the scaled value is below 1/2.
        return np.zeros_like(acc)
    prod = acc * mantissa
    half = np.int64(1) << (shift - 1)
    pos = (prod + half) >> shift
    neg = -((-prod + half) >> shift)
    return np.where(prod >= 0, pos, neg)
