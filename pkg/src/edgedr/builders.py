"""Graph builders for the four classifier architectures.

Every layer schedule is a config value rather than a constant, so a
different reading of the source architectures can be expressed without
code changes. The shipped defaults are tuned so the int8-serialized
models land on the published size targets and preserve the published
compute ordering (shuffle-net < mobile-net < custom stack < squeeze-net
in multiply-accumulates).

Weights are randomly initialized, uniform in [-0.05, 0.05] from a seeded
generator; batchnorm layers are sampled near identity and folded at
build time, so graphs never carry a batchnorm op. Externally trained
weights can be dropped in through the raw-tensor sidecar
(:func:`apply_weight_sidecar`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import (
    INPUT_SHAPE,
    NUM_CLASSES,
    DenseAttrs,
    DwSepAttrs,
    ModelGraph,
    OpNode,
    PoolAttrs,
    ShuffleAttrs,
    weight_key,
)
from .ops import (
    BatchNormParams,
    ConvAttrs,
    FireAttrs,
    conv_output_geometry,
    fold_batchnorm,
)
from .tensor import Tensor

WEIGHT_INIT_RANGE = 0.05


@dataclass(frozen=True)
class MobileNetConfig:
    stem_channels: int = 32
    # (out_channels, stride) per depthwise-separable block, at width 1.0
    blocks: tuple = (
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    )


@dataclass(frozen=True)
class ShuffleNetConfig:
    stem_channels: int = 24
    stage_channels: tuple = (72, 144, 240)
    stage_repeats: tuple = (2, 6, 3)
    bottleneck_ratio: int = 4
    channel_round: int = 24  # keeps scaled widths divisible for groups 2 and 3


@dataclass(frozen=True)
class SqueezeNetConfig:
    stem_channels: int = 48
    stem_kernel: tuple = (3, 3)
    stem_stride: tuple = (1, 1)
    # (squeeze, expand1, expand3) per fire block
    fires: tuple = (
        (16, 48, 48),
        (16, 48, 48),
        (24, 64, 64),
        (24, 64, 64),
        (32, 96, 96),
        (32, 72, 72),
        (32, 72, 72),
        (24, 72, 72),
    )
    pool_after: tuple = (2, 4, 6)  # fire indexes (0-based) followed by a maxpool


@dataclass(frozen=True)
class CustomDnnConfig:
    # (out_channels, (kh, kw)) per conv stage; each conv is valid-padded
    # and followed by a 2x2/2 maxpool
    filters: tuple = ((40, (3, 3)), (80, (3, 3)), (96, (3, 3)), (128, (3, 3)))
    hidden_units: int = 80


class _Assembler:
    """Incrementally builds a valid graph, tracking shapes and tensor ids."""

    def __init__(self, name: str, rng: np.random.Generator):
        self.name = name
        self.rng = rng
        self.nodes = []
        self.weights = {}
        self.next_tid = 1
        self.cur_tid = 0
        self.cur_shape = INPUT_SHAPE

    def _tid(self) -> int:
        t = self.next_tid
        self.next_tid += 1
        return t

    def _init(self, shape) -> np.ndarray:
        lo = WEIGHT_INIT_RANGE
        return self.rng.uniform(-lo, lo, size=shape).astype(np.float32)

    def _random_bn(self, channels: int) -> BatchNormParams:
        r = self.rng
        return BatchNormParams(
            gamma=r.uniform(0.9, 1.1, channels).astype(np.float32),
            beta=r.uniform(-0.05, 0.05, channels).astype(np.float32),
            moving_mean=r.uniform(-0.05, 0.05, channels).astype(np.float32),
            moving_var=r.uniform(0.9, 1.1, channels).astype(np.float32),
        )

    def _conv_pair(self, shape, batchnorm: bool):
        w = self._init(shape)
        b = self._init(shape[-1])
        if batchnorm:
            w, b = fold_batchnorm(w, b, self._random_bn(shape[-1]))
        return Tensor.from_array(w), Tensor.from_array(b)

    def _push(self, node: OpNode, out_shape):
        self.nodes.append(node)
        self.cur_tid = node.output
        self.cur_shape = tuple(int(d) for d in out_shape)

    def conv(self, out_channels, kernel, stride=(1, 1), padding="same", groups=1, batchnorm=False):
        cin = self.cur_shape[3]
        if cin % groups != 0 or out_channels % groups != 0:
            raise ValueError(
                f"{self.name}: channels {cin}->{out_channels} not divisible by groups {groups}"
            )
        nid = len(self.nodes)
        w, b = self._conv_pair((*kernel, cin // groups, out_channels), batchnorm)
        self.weights[weight_key(nid, "w")] = w
        self.weights[weight_key(nid, "b")] = b
        ho, wo, _ = conv_output_geometry(
            self.cur_shape[1], self.cur_shape[2], *kernel, *stride, padding
        )
        attrs = ConvAttrs(tuple(kernel), tuple(stride), padding, groups, out_channels)
        self._push(
            OpNode(nid, "conv2d", attrs, [self.cur_tid], self._tid()),
            (1, ho, wo, out_channels),
        )

    def dwsep(self, out_channels, stride=(1, 1), batchnorm=True):
        cin = self.cur_shape[3]
        nid = len(self.nodes)
        dw_w, dw_b = self._conv_pair((3, 3, 1, cin), batchnorm)
        pw_w, pw_b = self._conv_pair((1, 1, cin, out_channels), batchnorm)
        self.weights[weight_key(nid, "dw.w")] = dw_w
        self.weights[weight_key(nid, "dw.b")] = dw_b
        self.weights[weight_key(nid, "pw.w")] = pw_w
        self.weights[weight_key(nid, "pw.b")] = pw_b
        ho, wo, _ = conv_output_geometry(
            self.cur_shape[1], self.cur_shape[2], 3, 3, *stride, "same"
        )
        mid = self._tid()
        self._push(
            OpNode(
                nid,
                "dwsep_block",
                DwSepAttrs(tuple(stride), out_channels),
                [self.cur_tid],
                self._tid(),
                internal_ids=(mid,),
                internal_qps=(None,),
            ),
            (1, ho, wo, out_channels),
        )

    def fire(self, squeeze, expand1, expand3):
        cin = self.cur_shape[3]
        nid = len(self.nodes)
        for role, shape in (
            ("squeeze", (1, 1, cin, squeeze)),
            ("e1", (1, 1, squeeze, expand1)),
            ("e3", (3, 3, squeeze, expand3)),
        ):
            w, b = self._conv_pair(shape, batchnorm=False)
            self.weights[weight_key(nid, f"{role}.w")] = w
            self.weights[weight_key(nid, f"{role}.b")] = b
        sq_tid = self._tid()
        self._push(
            OpNode(
                nid,
                "fire",
                FireAttrs(squeeze, expand1, expand3),
                [self.cur_tid],
                self._tid(),
                internal_ids=(sq_tid,),
                internal_qps=(None,),
            ),
            (1, self.cur_shape[1], self.cur_shape[2], expand1 + expand3),
        )

    def shuffle(self, groups):
        nid = len(self.nodes)
        if self.cur_shape[3] % groups != 0:
            raise ValueError(
                f"{self.name}: channels {self.cur_shape[3]} not divisible by groups {groups}"
            )
        self._push(
            OpNode(nid, "channel_shuffle", ShuffleAttrs(groups), [self.cur_tid], self._tid()),
            self.cur_shape,
        )

    def relu(self):
        nid = len(self.nodes)
        self._push(OpNode(nid, "relu", None, [self.cur_tid], self._tid()), self.cur_shape)

    def maxpool(self, window=(2, 2), stride=(2, 2)):
        wh, ww = window
        h, w = self.cur_shape[1], self.cur_shape[2]
        if wh > h or ww > w:
            raise ValueError(
                f"{self.name}: pool window {wh}x{ww} exceeds feature map {h}x{w}"
            )
        nid = len(self.nodes)
        ho = (h - wh) // stride[0] + 1
        wo = (w - ww) // stride[1] + 1
        self._push(
            OpNode(nid, "maxpool", PoolAttrs(tuple(window), tuple(stride)), [self.cur_tid], self._tid()),
            (1, ho, wo, self.cur_shape[3]),
        )

    def gap(self):
        nid = len(self.nodes)
        self._push(
            OpNode(nid, "gap", None, [self.cur_tid], self._tid()),
            (1, 1, 1, self.cur_shape[3]),
        )

    def flatten(self):
        nid = len(self.nodes)
        self._push(
            OpNode(nid, "flatten", None, [self.cur_tid], self._tid()),
            (1, 1, 1, int(np.prod(self.cur_shape))),
        )

    def dense(self, units):
        k = self.cur_shape[3]
        nid = len(self.nodes)
        self.weights[weight_key(nid, "w")] = Tensor.from_array(self._init((k, units)))
        self.weights[weight_key(nid, "b")] = Tensor.from_array(self._init(units))
        self._push(
            OpNode(nid, "dense", DenseAttrs(units), [self.cur_tid], self._tid()),
            (1, 1, 1, units),
        )

    def softmax(self):
        nid = len(self.nodes)
        self._push(OpNode(nid, "softmax", None, [self.cur_tid], self._tid()), self.cur_shape)

    def finish(self) -> ModelGraph:
        return ModelGraph(
            name=self.name,
            precision="f32",
            nodes=self.nodes,
            weights=self.weights,
            num_tensors=self.next_tid,
        )


SUPPORTED_WIDTH_MULTIPLIERS = (0.25, 0.5, 0.75, 1.0)


def build_mobilenet(
    width_multiplier: float = 1.0,
    config: MobileNetConfig = MobileNetConfig(),
    seed: int = 0,
) -> ModelGraph:
    """Stem conv + 13 depthwise-separable blocks + GAP + dense head."""
    if width_multiplier not in SUPPORTED_WIDTH_MULTIPLIERS:
        raise ValueError(
            f"width multiplier {width_multiplier} not in {SUPPORTED_WIDTH_MULTIPLIERS}"
        )
    a = _Assembler("mobilenet", np.random.default_rng(seed))
    scale = lambda c: max(8, int(round(c * width_multiplier)))
    a.conv(scale(config.stem_channels), (3, 3), stride=(2, 2), batchnorm=True)
    a.relu()
    for out_c, s in config.blocks:
        a.dwsep(scale(out_c), stride=(s, s), batchnorm=True)
    a.gap()
    a.dense(NUM_CLASSES)
    a.softmax()
    return a.finish()


def build_shufflenet(
    groups: int = 3,
    width_multiplier: float = 1.0,
    config: ShuffleNetConfig = ShuffleNetConfig(),
    seed: int = 0,
) -> ModelGraph:
    """Stem conv + maxpool, three stages of shuffle blocks, GAP + dense head.

    Each block is a plain group-pointwise -> shuffle -> 3x3 depthwise ->
    group-pointwise stack; the first block of a stage carries stride 2 on
    the depthwise conv. Channel divisibility by `groups` is checked when
    the convs are emitted.
    """
    if groups < 1:
        raise ValueError("groups must be positive")
    if width_multiplier <= 0:
        raise ValueError("width multiplier must be positive")
    a = _Assembler("shufflenet", np.random.default_rng(seed))

    def scale(c):
        r = config.channel_round
        return max(r, int(round(c * width_multiplier / r)) * r)

    a.conv(config.stem_channels, (3, 3), stride=(2, 2), batchnorm=True)
    a.relu()
    a.maxpool((3, 3), (2, 2))
    for stage_c, repeats in zip(config.stage_channels, config.stage_repeats):
        out_c = scale(stage_c)
        mid_c = max(groups, out_c // config.bottleneck_ratio)
        for block in range(repeats):
            stride = (2, 2) if block == 0 else (1, 1)
            a.conv(mid_c, (1, 1), groups=groups, batchnorm=True)
            a.relu()
            a.shuffle(groups)
            cin = a.cur_shape[3]
            a.conv(cin, (3, 3), stride=stride, groups=cin, batchnorm=True)
            a.conv(out_c, (1, 1), groups=groups, batchnorm=True)
            a.relu()
    a.gap()
    a.dense(NUM_CLASSES)
    a.softmax()
    return a.finish()


def build_squeezenet(
    config: SqueezeNetConfig = SqueezeNetConfig(), seed: int = 0
) -> ModelGraph:
    """Stem conv, eight fire blocks with interleaved maxpools, 1x1 head, GAP."""
    a = _Assembler("squeezenet", np.random.default_rng(seed))
    a.conv(config.stem_channels, config.stem_kernel, stride=config.stem_stride)
    a.relu()
    a.maxpool((3, 3), (2, 2))
    for i, (sq, e1, e3) in enumerate(config.fires):
        a.fire(sq, e1, e3)
        if i in config.pool_after:
            a.maxpool((3, 3), (2, 2))
    a.conv(NUM_CLASSES, (1, 1), padding="valid")
    a.gap()
    a.softmax()
    return a.finish()


def build_custom_dnn(
    filters=None,
    hidden_units: int = None,
    config: CustomDnnConfig = CustomDnnConfig(),
    seed: int = 0,
) -> ModelGraph:
    """Valid conv + 2x2 maxpool stack, flatten, two dense layers."""
    filters = tuple(filters) if filters is not None else config.filters
    hidden = hidden_units if hidden_units is not None else config.hidden_units
    if not filters:
        raise ValueError("custom network needs at least one conv stage")
    a = _Assembler("customdnn", np.random.default_rng(seed))
    for i, (out_c, kernel) in enumerate(filters):
        h, w = a.cur_shape[1], a.cur_shape[2]
        if h < kernel[0] + 1 or w < kernel[1] + 1:
            raise ValueError(
                f"customdnn: conv/pool stage {i} drives spatial size {h}x{w} below 1x1"
            )
        a.conv(out_c, kernel, padding="valid")
        a.relu()
        a.maxpool((2, 2), (2, 2))
    a.flatten()
    a.dense(hidden)
    a.relu()
    a.dense(NUM_CLASSES)
    a.softmax()
    return a.finish()


ARCHITECTURES = {
    "mobilenet": build_mobilenet,
    "shufflenet": build_shufflenet,
    "squeezenet": build_squeezenet,
    "customdnn": build_custom_dnn,
}


def apply_weight_sidecar(graph: ModelGraph, manifest_path) -> ModelGraph:
    """Replace weight payloads from a raw-tensor sidecar.

    The manifest is a JSON object mapping weight names to files of raw
    little-endian f32 payloads, resolved relative to the manifest. Shapes
    stay as built; element counts must match.
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    for name, rel in manifest.items():
        if name not in graph.weights:
            raise ValueError(f"sidecar names unknown weight {name!r}")
        old = graph.weights[name]
        raw = np.fromfile(base / rel, dtype="<f4")
        if raw.size != old.size:
            raise ValueError(
                f"sidecar payload for {name!r} has {raw.size} elements, expected {old.size}"
            )
        graph.weights[name] = Tensor(old.shape, "f32", raw.reshape(old.shape).copy())
    return graph


def export_weight_sidecar(graph: ModelGraph, out_dir) -> Path:
    """Write every weight as a raw f32 payload plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, t in graph.weights.items():
        if t.dtype != "f32":
            raise ValueError("sidecar export applies to f32 graphs only")
        fname = name.replace(".", "_") + ".bin"
        np.ascontiguousarray(t.data, dtype="<f4").tofile(out_dir / fname)
        manifest[name] = fname
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path
