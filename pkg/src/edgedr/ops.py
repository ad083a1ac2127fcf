"""Layer kernels: f32 reference paths and bit-exact int8 paths.

Every kernel is a pure function from tensors to a tensor. The f32 paths
accumulate in float64 and emit float32. The int8 paths accumulate exactly
(all intermediate sums stay far below 2^53, so float64 matmul is exact),
assert the int32 envelope, and requantize through the fixed-point
multiplier from :mod:`edgedr.tensor` with half-away-from-zero rounding.

Layouts: activations (n, h, w, c); conv weights (kh, kw, cin_per_group,
cout); dense weights (k, m); biases (cout,). "Same" padding splits evenly
with the extra pixel on the bottom/right.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    QMAX,
    QMIN,
    QuantParams,
    Tensor,
    apply_requant,
    dequantize,
    requant_multiplier,
    round_half_away,
)


@dataclass(frozen=True)
class ConvAttrs:
    """Static convolution attributes; groups=1 is standard, groups=cin depthwise."""

    kernel: tuple
    stride: tuple
    padding: str  # 'valid' | 'same'
    groups: int
    out_channels: int

    def __post_init__(self):
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.groups < 1:
            raise ValueError(f"groups must be positive, got {self.groups}")
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be positive, got {self.out_channels}")
        if self.out_channels % self.groups != 0:
            raise ValueError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}"
            )


@dataclass(frozen=True)
class FireAttrs:
    """Squeeze/expand channel sizes of a fire block; output = expand1 + expand3."""

    squeeze_channels: int
    expand1_channels: int
    expand3_channels: int

    def __post_init__(self):
        if min(self.squeeze_channels, self.expand1_channels, self.expand3_channels) < 1:
            raise ValueError("fire channel counts must be positive")

    @property
    def out_channels(self) -> int:
        return self.expand1_channels + self.expand3_channels


@dataclass(frozen=True)
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    epsilon: float = 1e-3

    def __post_init__(self):
        c = np.asarray(self.gamma).shape
        for name in ("beta", "moving_mean", "moving_var"):
            if np.asarray(getattr(self, name)).shape != c:
                raise ValueError(f"batchnorm {name} shape differs from gamma shape {c}")
        if np.any(np.asarray(self.moving_var) < 0):
            raise ValueError("moving_var must be non-negative")


def conv_output_geometry(h, w, kh, kw, sh, sw, padding):
    """Output spatial size and (top, bottom, left, right) padding amounts."""
    if padding == "valid":
        if kh > h or kw > w:
            raise ValueError(
                f"kernel {kh}x{kw} exceeds input {h}x{w} under valid padding"
            )
        return (h - kh) // sh + 1, (w - kw) // sw + 1, (0, 0, 0, 0)
    ho = -(-h // sh)
    wo = -(-w // sw)
    pad_h = max((ho - 1) * sh + kh - h, 0)
    pad_w = max((wo - 1) * sw + kw - w, 0)
    return ho, wo, (pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2)


def _pad_nhwc(x: np.ndarray, pads, value) -> np.ndarray:
    pt, pb, pl, pr = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=value)


def _window_cols(xp: np.ndarray, kh, kw, sh, sw):
    """(1, Ho, Wo, kh, kw, C) view of all kernel windows of a padded input."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::sh, ::sw].transpose(0, 1, 2, 4, 5, 3)


def _conv_accumulate(xp: np.ndarray, w: np.ndarray, groups: int, sh: int, sw: int):
    """Raw float64 convolution accumulator over a padded NHWC input.

    Exact for integer-valued inputs (every partial sum stays below 2^53).
    Depthwise (groups == cin) avoids im2col and accumulates per tap.
    """
    kh, kw, cin_g, cout = w.shape
    cin = xp.shape[3]
    if groups == cin and cin_g == 1:
        mult = cout // cin
        ho = (xp.shape[1] - kh) // sh + 1
        wo = (xp.shape[2] - kw) // sw + 1
        acc = np.zeros((1, ho, wo, cout), dtype=np.float64)
        for dy in range(kh):
            for dx in range(kw):
                win = xp[:, dy : dy + ho * sh : sh, dx : dx + wo * sw : sw, :]
                if mult > 1:
                    win = np.repeat(win, mult, axis=3)
                acc += win * w[dy, dx, 0, :]
        return acc
    cols = _window_cols(xp, kh, kw, sh, sw)
    _, ho, wo = cols.shape[:3]
    cout_g = cout // groups
    acc = np.empty((1, ho, wo, cout), dtype=np.float64)
    for g in range(groups):
        patch = cols[..., g * cin_g : (g + 1) * cin_g].reshape(ho * wo, kh * kw * cin_g)
        wg = w[:, :, :, g * cout_g : (g + 1) * cout_g].reshape(kh * kw * cin_g, cout_g)
        acc[0, :, :, g * cout_g : (g + 1) * cout_g] = (patch @ wg).reshape(
            ho, wo, cout_g
        )
    return acc


def _check_conv_shapes(input: Tensor, weights: Tensor, attrs: ConvAttrs):
    if len(input.shape) != 4:
        raise ValueError(f"conv input must be rank 4 NHWC, got shape {input.shape}")
    if len(weights.shape) != 4:
        raise ValueError(f"conv weights must be rank 4, got shape {weights.shape}")
    kh, kw, cin_g, cout = weights.shape
    cin = input.shape[3]
    if (kh, kw) != tuple(attrs.kernel):
        raise ValueError(f"weight kernel {kh}x{kw} does not match attrs {attrs.kernel}")
    if cout != attrs.out_channels:
        raise ValueError(
            f"weight out_channels {cout} does not match attrs {attrs.out_channels}"
        )
    if cin % attrs.groups != 0:
        raise ValueError(f"input channels {cin} not divisible by groups {attrs.groups}")
    if cin_g != cin // attrs.groups:
        raise ValueError(
            f"weights expect {cin_g} channels per group, input provides "
            f"{cin // attrs.groups}"
        )


def _requant_to_i8(acc: np.ndarray, m_in: float, m_w: float, out_qp: QuantParams):
    mant, shift = requant_multiplier(m_in, m_w, out_qp.scale)
    q = apply_requant(acc, mant, shift) + out_qp.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def conv2d(
    input: Tensor,
    weights: Tensor,
    bias: Optional[Tensor],
    attrs: ConvAttrs,
    out_qparams: Optional[QuantParams] = None,
) -> Tensor:
    """2-D convolution (standard / grouped / depthwise by attrs.groups).

    f32 in, f32 weights: exact direct convolution. i8 in, i8 weights:
    int32 accumulation of (q_in - zp_in) * q_w plus int32 bias, then
    fixed-point requantization to out_qparams; with out_qparams None the
    accumulator is dequantized to f32 instead (classifier-head behaviour).
    """
    _check_conv_shapes(input, weights, attrs)
    kh, kw = attrs.kernel
    sh, sw = attrs.stride
    n, h, w_sz, cin = input.shape
    ho, wo, pads = conv_output_geometry(h, w_sz, kh, kw, sh, sw, attrs.padding)

    if input.dtype == "f32":
        if weights.dtype != "f32":
            raise ValueError("f32 conv requires f32 weights")
        xp = _pad_nhwc(input.data.astype(np.float64), pads, 0.0)
        acc = _conv_accumulate(xp, weights.data.astype(np.float64), attrs.groups, sh, sw)
        if bias is not None:
            acc += bias.data.astype(np.float64)
        return Tensor((n, ho, wo, attrs.out_channels), "f32", acc.astype(np.float32))

    if input.dtype != "i8" or weights.dtype != "i8":
        raise ValueError(f"conv2d does not accept {input.dtype}/{weights.dtype} operands")
    zp_in = input.qparams.zero_point
    xp = _pad_nhwc(input.data.astype(np.float64) - zp_in, pads, 0.0)
    acc = _conv_accumulate(xp, weights.data.astype(np.float64), attrs.groups, sh, sw)
    acc = acc.astype(np.int64)
    if bias is not None:
        if bias.dtype != "i32":
            raise ValueError("i8 conv requires an i32 bias")
        acc += bias.data.astype(np.int64)
    assert np.abs(acc).max(initial=0) < 1 << 31, "int32 accumulator overflow"
    s_in = input.qparams.scale
    s_w = weights.qparams.scale
    if out_qparams is None:
        real = acc.astype(np.float64) * (s_in * s_w)
        return Tensor((n, ho, wo, attrs.out_channels), "f32", real.astype(np.float32))
    q = _requant_to_i8(acc, s_in, s_w, out_qparams)
    return Tensor((n, ho, wo, attrs.out_channels), "i8", q, out_qparams)


def relu(input: Tensor) -> Tensor:
    """f32: max(x, 0). i8: clamp below at the zero point (the code for real 0)."""
    if input.dtype == "f32":
        return Tensor(input.shape, "f32", np.maximum(input.data, 0.0))
    if input.dtype == "i8":
        zp = np.int8(input.qparams.zero_point)
        return Tensor(input.shape, "i8", np.maximum(input.data, zp), input.qparams)
    raise ValueError(f"relu does not accept {input.dtype}")


def maxpool2d(input: Tensor, window: tuple, stride: tuple) -> Tensor:
    """Per-window channelwise max, valid padding. Needs no requantization:
    max commutes with the affine map because scales are positive."""
    wh, ww = window
    sh, sw = stride
    n, h, w_sz, c = input.shape
    if wh > h or ww > w_sz:
        raise ValueError(f"pool window {wh}x{ww} exceeds input {h}x{w_sz}")
    win = _window_cols(input.data, wh, ww, sh, sw)
    out = win.max(axis=(3, 4))
    return Tensor(out.shape, input.dtype, np.ascontiguousarray(out), input.qparams)


def global_avg_pool(input: Tensor, out_qparams: Optional[QuantParams] = None) -> Tensor:
    """Spatial mean per channel -> (1, 1, 1, C).

    The i8 path sums (q - zp) into int32 and requantizes with the combined
    factor s_in / (s_out * h * w), folding the division into the
    fixed-point multiplier.
    """
    n, h, w_sz, c = input.shape
    if h < 1 or w_sz < 1:
        raise ValueError(f"pooling over empty spatial extent {h}x{w_sz}")
    if input.dtype == "f32":
        mean = input.data.astype(np.float64).mean(axis=(1, 2), keepdims=True)
        return Tensor((n, 1, 1, c), "f32", mean.astype(np.float32))
    if input.dtype != "i8":
        raise ValueError(f"global_avg_pool does not accept {input.dtype}")
    if out_qparams is None:
        raise ValueError("i8 global_avg_pool needs output quantization parameters")
    centered = input.data.astype(np.int64) - input.qparams.zero_point
    acc = centered.sum(axis=(1, 2), keepdims=True)
    assert np.abs(acc).max(initial=0) < 1 << 31, "int32 accumulator overflow"
    q = _requant_to_i8(acc, input.qparams.scale, 1.0 / (h * w_sz), out_qparams)
    return Tensor((n, 1, 1, c), "i8", q, out_qparams)


def channel_shuffle(input: Tensor, groups: int) -> Tensor:
    """Reshape-(g, C/g)-transpose channel permutation; spatial data untouched."""
    c = input.shape[3]
    if c % groups != 0:
        raise ValueError(f"channels {c} not divisible by shuffle groups {groups}")
    j = np.arange(c)
    perm = (j % groups) * (c // groups) + j // groups
    out = np.ascontiguousarray(input.data[..., perm])
    return Tensor(input.shape, input.dtype, out, input.qparams)


def dense(
    input: Tensor,
    weights: Tensor,
    bias: Optional[Tensor],
    out_qparams: Optional[QuantParams] = None,
) -> Tensor:
    """Fully connected layer y = xW + b on a flattened (1, 1, 1, K) input."""
    if len(input.shape) != 4 or input.shape[0] != 1 or input.shape[1:3] != (1, 1):
        raise ValueError(f"dense expects a flattened 1x1x1xK input, got {input.shape}")
    if len(weights.shape) != 2:
        raise ValueError(f"dense weights must be rank 2 (K, M), got {weights.shape}")
    k = input.shape[3]
    kw, m = weights.shape
    if k != kw:
        raise ValueError(f"dense inner dimension mismatch: input K={k}, weights K={kw}")

    if input.dtype == "f32":
        acc = input.data.reshape(1, k).astype(np.float64) @ weights.data.astype(np.float64)
        if bias is not None:
            acc += bias.data.astype(np.float64)
        return Tensor((1, 1, 1, m), "f32", acc.astype(np.float32))

    if input.dtype != "i8" or weights.dtype != "i8":
        raise ValueError(f"dense does not accept {input.dtype}/{weights.dtype} operands")
    x = input.data.reshape(1, k).astype(np.float64) - input.qparams.zero_point
    acc = (x @ weights.data.astype(np.float64)).astype(np.int64)
    if bias is not None:
        if bias.dtype != "i32":
            raise ValueError("i8 dense requires an i32 bias")
        acc += bias.data.astype(np.int64)
    assert np.abs(acc).max(initial=0) < 1 << 31, "int32 accumulator overflow"
    s_in = input.qparams.scale
    s_w = weights.qparams.scale
    if out_qparams is None:
        real = acc.astype(np.float64) * (s_in * s_w)
        return Tensor((1, 1, 1, m), "f32", real.astype(np.float32))
    q = _requant_to_i8(acc, s_in, s_w, out_qparams)
    return Tensor((1, 1, 1, m), "i8", q, out_qparams)


def flatten(input: Tensor) -> Tensor:
    """Collapse (1, h, w, c) row-major into (1, 1, 1, h*w*c)."""
    if input.shape[0] != 1:
        raise ValueError("flatten expects batch size 1")
    out = input.data.reshape(1, 1, 1, -1)
    return Tensor(out.shape, input.dtype, out, input.qparams)


def softmax(logits: Tensor) -> Tensor:
    """Stable softmax, always computed in f32 (i8 input is dequantized first)."""
    if logits.dtype == "i8":
        logits = dequantize(logits)
    x = logits.data.astype(np.float64)
    if not np.isfinite(x).all():
        raise ValueError("softmax requires finite logits")
    e = np.exp(x - x.max())
    return Tensor(logits.shape, "f32", (e / e.sum()).astype(np.float32))


def fold_batchnorm(weights: np.ndarray, bias: np.ndarray, bn: BatchNormParams):
    """Fold a per-output-channel batchnorm into the preceding conv/dense.

    w' = w * gamma / sqrt(var + eps) per output channel (last weight axis),
    b' = (b - mean) * gamma / sqrt(var + eps) + beta. Done once when a
    graph is finalized, so inference carries no batchnorm op.
    """
    var = np.asarray(bn.moving_var, dtype=np.float64)
    if np.any(var + bn.epsilon <= 0):
        raise ValueError("batchnorm variance + epsilon must be positive")
    factor = np.asarray(bn.gamma, np.float64) / np.sqrt(var + bn.epsilon)
    w = np.asarray(weights, np.float64) * factor
    b = (np.asarray(bias, np.float64) - np.asarray(bn.moving_mean, np.float64)) * factor
    b = b + np.asarray(bn.beta, np.float64)
    return w.astype(np.float32), b.astype(np.float32)


def depthwise_separable_block(
    input: Tensor,
    dw_weights: Tensor,
    dw_bias: Optional[Tensor],
    pw_weights: Tensor,
    pw_bias: Optional[Tensor],
    bn_dw: Optional[BatchNormParams] = None,
    bn_pw: Optional[BatchNormParams] = None,
    stride: tuple = (1, 1),
    mid_qparams: Optional[QuantParams] = None,
    out_qparams: Optional[QuantParams] = None,
    internals: Optional[dict] = None,
) -> Tensor:
    """Depthwise conv -> ReLU -> pointwise conv -> ReLU, the MobileNet block.

    Batchnorms, when given on the f32 path, are folded into the conv
    weights first; the i8 path requires them pre-folded. `internals`
    receives the post-depthwise activation under key 'mid' so calibration
    can observe inside the block.
    """
    cin = input.shape[3]
    kh, kw, cin_g, dw_out = dw_weights.shape
    if cin_g != 1 or kh != kw:
        raise ValueError(f"depthwise weights must be (k, k, 1, c), got {dw_weights.shape}")
    if pw_weights.shape[0] != 1 or pw_weights.shape[1] != 1:
        raise ValueError(f"pointwise kernel must be 1x1, got {pw_weights.shape[:2]}")
    if input.dtype == "f32":
        if bn_dw is not None:
            w, b = fold_batchnorm(dw_weights.data, _bias_data(dw_bias, dw_out), bn_dw)
            dw_weights, dw_bias = Tensor.from_array(w), Tensor.from_array(b)
        if bn_pw is not None:
            w, b = fold_batchnorm(
                pw_weights.data, _bias_data(pw_bias, pw_weights.shape[3]), bn_pw
            )
            pw_weights, pw_bias = Tensor.from_array(w), Tensor.from_array(b)
    elif bn_dw is not None or bn_pw is not None:
        raise ValueError("i8 blocks require batchnorm to be folded beforehand")

    dw_attrs = ConvAttrs((kh, kw), tuple(stride), "same", cin, dw_out)
    mid = relu(conv2d(input, dw_weights, dw_bias, dw_attrs, mid_qparams))
    if internals is not None:
        internals["mid"] = mid
    pw_attrs = ConvAttrs((1, 1), (1, 1), "valid", 1, pw_weights.shape[3])
    return relu(conv2d(mid, pw_weights, pw_bias, pw_attrs, out_qparams))


def fire(
    input: Tensor,
    squeeze_w: Tensor,
    squeeze_b: Optional[Tensor],
    expand1_w: Tensor,
    expand1_b: Optional[Tensor],
    expand3_w: Tensor,
    expand3_b: Optional[Tensor],
    attrs: FireAttrs,
    squeeze_qparams: Optional[QuantParams] = None,
    out_qparams: Optional[QuantParams] = None,
    internals: Optional[dict] = None,
) -> Tensor:
    """Fire block: 1x1 squeeze feeding parallel 1x1 and 3x3 expands, concatenated.

    Both expand branches requantize straight to the shared output
    parameters, so the channel concat is a plain copy. `internals`
    receives the post-squeeze activation under key 'squeeze'.
    """
    if squeeze_w.shape[:2] != (1, 1) or expand1_w.shape[:2] != (1, 1):
        raise ValueError("squeeze and expand1 kernels must be 1x1")
    if expand3_w.shape[:2] != (3, 3):
        raise ValueError(f"expand3 kernel must be 3x3, got {expand3_w.shape[:2]}")
    cin = input.shape[3]
    sq_attrs = ConvAttrs((1, 1), (1, 1), "valid", 1, attrs.squeeze_channels)
    squeezed = relu(conv2d(input, squeeze_w, squeeze_b, sq_attrs, squeeze_qparams))
    if internals is not None:
        internals["squeeze"] = squeezed
    e1_attrs = ConvAttrs((1, 1), (1, 1), "valid", 1, attrs.expand1_channels)
    e3_attrs = ConvAttrs((3, 3), (1, 1), "same", 1, attrs.expand3_channels)
    a = relu(conv2d(squeezed, expand1_w, expand1_b, e1_attrs, out_qparams))
    b = relu(conv2d(squeezed, expand3_w, expand3_b, e3_attrs, out_qparams))
    out = np.concatenate([a.data, b.data], axis=3)
    return Tensor(out.shape, a.dtype, out, a.qparams)


def _bias_data(bias: Optional[Tensor], channels: int) -> np.ndarray:
    if bias is None:
        return np.zeros(channels, dtype=np.float32)
    return bias.data
