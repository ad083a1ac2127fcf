"""Model graph IR, shape inference, and the executor.

A :class:`ModelGraph` is a topologically ordered list of single-output
nodes plus a named weight map. Tensor ids are dense integers: id 0 is the
graph input, every node output gets a fresh id, and fused blocks
(depthwise-separable, fire) own extra ids for their internal activations
so calibration and memory planning can see inside them.

Quantization state lives on the nodes (`out_qp`, `internal_qps`) and on
the graph (`input_qp`); f32 graphs carry none. In an int8 graph the last
weighted node emits f32 logits straight from its accumulator, so softmax
and argmax behave identically in both precisions.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Callable, Optional

import numpy as np

from . import ops
from .tensor import QuantParams, Tensor, quantize

INPUT_SHAPE = (1, 224, 224, 3)
NUM_CLASSES = 5

NODE_KINDS = (
    "conv2d",
    "dwsep_block",
    "channel_shuffle",
    "fire",
    "maxpool",
    "gap",
    "relu",
    "dense",
    "flatten",
    "softmax",
)

# Kinds that carry weights, and the per-node weight roles they own.
WEIGHT_ROLES = {
    "conv2d": ("w", "b"),
    "dense": ("w", "b"),
    "dwsep_block": ("dw.w", "dw.b", "pw.w", "pw.b"),
    "fire": ("squeeze.w", "squeeze.b", "e1.w", "e1.b", "e3.w", "e3.b"),
}

# Kinds whose i8 output reuses the input quantization unchanged.
PASSTHROUGH_KINDS = ("channel_shuffle", "maxpool", "relu", "flatten")


class DRLabel(IntEnum):
    """Diabetic retinopathy severity grades; classifier output index i is grade i."""

    NoDR = 0
    Mild = 1
    Moderate = 2
    Severe = 3
    Proliferative = 4


class GraphValidationError(ValueError):
    pass


@dataclass
class DwSepAttrs:
    stride: tuple
    out_channels: int


@dataclass
class ShuffleAttrs:
    groups: int


@dataclass
class PoolAttrs:
    window: tuple
    stride: tuple


@dataclass
class DenseAttrs:
    units: int


@dataclass
class OpNode:
    id: int
    kind: str
    attrs: object  # kind-specific attribute record, None for attr-free kinds
    inputs: list
    output: int
    out_qp: Optional[QuantParams] = None
    internal_ids: tuple = ()
    internal_qps: tuple = ()


def weight_key(node_id: int, role: str) -> str:
    return f"n{node_id}.{role}"


@dataclass
class ModelGraph:
    name: str
    precision: str  # 'f32' | 'i8'
    nodes: list
    weights: dict
    num_tensors: int
    input_qp: Optional[QuantParams] = None
    input_shape: tuple = INPUT_SHAPE
    num_classes: int = NUM_CLASSES


@dataclass
class ShapeReport:
    """One inferred (shape, dtype) per tensor id, plus a per-node summary."""

    shapes: dict
    dtypes: dict
    node_rows: list  # (node_id, kind, output shape)

    def tensor_bytes(self, tid: int) -> int:
        elem = {"f32": 4, "i8": 1, "i32": 4}[self.dtypes[tid]]
        return int(np.prod(self.shapes[tid])) * elem


def _fail(node, msg):
    raise GraphValidationError(f"node {node.id} ({node.kind}): {msg}")


def _want_weight(graph, node, role, report=False):
    key = weight_key(node.id, role)
    if key not in graph.weights:
        _fail(node, f"missing weight tensor {key!r}")
    return graph.weights[key]


def validate(graph: ModelGraph) -> ShapeReport:
    """Run shape/dtype inference over the whole graph.

    Returns the per-tensor report or raises GraphValidationError naming
    the first offending node and dimension. Required before execute and
    serialize; both call it internally.
    """
    if graph.precision not in ("f32", "i8"):
        raise GraphValidationError(f"unknown precision {graph.precision!r}")
    if graph.input_shape != INPUT_SHAPE:
        raise GraphValidationError(f"input shape must be {INPUT_SHAPE}")
    if graph.num_classes != NUM_CLASSES:
        raise GraphValidationError(f"num_classes must be {NUM_CLASSES}")
    if not graph.nodes:
        raise GraphValidationError("graph has no nodes")
    if graph.precision == "i8" and graph.input_qp is None:
        raise GraphValidationError("i8 graph is missing input quantization parameters")

    shapes = {0: graph.input_shape}
    dtypes = {0: "i8" if graph.precision == "i8" else "f32"}
    rows = []

    def define(node, tid, shape, dtype):
        if tid in shapes:
            _fail(node, f"tensor id {tid} produced twice")
        if not 0 <= tid < graph.num_tensors:
            _fail(node, f"tensor id {tid} outside [0, {graph.num_tensors})")
        shapes[tid] = tuple(int(d) for d in shape)
        dtypes[tid] = dtype

    for idx, node in enumerate(graph.nodes):
        if node.kind not in NODE_KINDS:
            _fail(node, f"unknown kind {node.kind!r}")
        for tid in node.inputs:
            if tid not in shapes:
                _fail(node, f"input tensor {tid} not produced by any earlier node")
        if len(node.inputs) != 1:
            _fail(node, f"expected exactly one input, got {len(node.inputs)}")
        in_shape = shapes[node.inputs[0]]
        in_dtype = dtypes[node.inputs[0]]
        quantized = in_dtype == "i8"

        if graph.precision == "f32" and (
            node.out_qp is not None or any(q is not None for q in node.internal_qps)
        ):
            _fail(node, "f32 graph carries quantization parameters")
        if node.kind in WEIGHT_ROLES and graph.precision == "i8" and not quantized:
            _fail(node, "weighted node placed after the f32 classifier head began")

        try:
            if node.kind == "conv2d":
                w = _want_weight(graph, node, "w")
                _want_weight(graph, node, "b")
                a = node.attrs
                if in_shape[3] % a.groups != 0:
                    _fail(node, f"input channels {in_shape[3]} not divisible by groups {a.groups}")
                if w.shape != (a.kernel[0], a.kernel[1], in_shape[3] // a.groups, a.out_channels):
                    _fail(
                        node,
                        f"weight shape {w.shape} inconsistent with attrs "
                        f"(kernel {a.kernel}, groups {a.groups}, out {a.out_channels}) "
                        f"and input channels {in_shape[3]}",
                    )
                ho, wo, _ = ops.conv_output_geometry(
                    in_shape[1], in_shape[2], *a.kernel, *a.stride, a.padding
                )
                out_dtype = "i8" if (quantized and node.out_qp is not None) else "f32"
                define(node, node.output, (1, ho, wo, a.out_channels), out_dtype)

            elif node.kind == "dwsep_block":
                dw = _want_weight(graph, node, "dw.w")
                pw = _want_weight(graph, node, "pw.w")
                _want_weight(graph, node, "dw.b")
                _want_weight(graph, node, "pw.b")
                cin = in_shape[3]
                if dw.shape[2] != 1 or dw.shape[3] % cin != 0:
                    _fail(node, f"depthwise weights {dw.shape} incompatible with {cin} channels")
                if pw.shape[:2] != (1, 1) or pw.shape[2] != dw.shape[3]:
                    _fail(node, f"pointwise weights {pw.shape} incompatible with depthwise output")
                if pw.shape[3] != node.attrs.out_channels:
                    _fail(node, f"pointwise out {pw.shape[3]} != attrs {node.attrs.out_channels}")
                if len(node.internal_ids) != 1:
                    _fail(node, "depthwise-separable block owns exactly one internal tensor")
                ho, wo, _ = ops.conv_output_geometry(
                    in_shape[1], in_shape[2], dw.shape[0], dw.shape[1], *node.attrs.stride, "same"
                )
                if quantized and (node.out_qp is None or node.internal_qps[0] is None):
                    _fail(node, "fused block in an i8 graph is missing quantization parameters")
                dt = "i8" if quantized else "f32"
                define(node, node.internal_ids[0], (1, ho, wo, dw.shape[3]), dt)
                define(node, node.output, (1, ho, wo, node.attrs.out_channels), dt)

            elif node.kind == "channel_shuffle":
                if in_shape[3] % node.attrs.groups != 0:
                    _fail(
                        node,
                        f"channels {in_shape[3]} not divisible by groups {node.attrs.groups}",
                    )
                define(node, node.output, in_shape, in_dtype)

            elif node.kind == "fire":
                sq = _want_weight(graph, node, "squeeze.w")
                e1 = _want_weight(graph, node, "e1.w")
                e3 = _want_weight(graph, node, "e3.w")
                for role in ("squeeze.b", "e1.b", "e3.b"):
                    _want_weight(graph, node, role)
                a = node.attrs
                if sq.shape != (1, 1, in_shape[3], a.squeeze_channels):
                    _fail(node, f"squeeze weights {sq.shape} inconsistent with input {in_shape}")
                if e1.shape != (1, 1, a.squeeze_channels, a.expand1_channels):
                    _fail(node, f"expand1 weights {e1.shape} inconsistent with squeeze")
                if e3.shape != (3, 3, a.squeeze_channels, a.expand3_channels):
                    _fail(node, f"expand3 weights {e3.shape} inconsistent with squeeze")
                if len(node.internal_ids) != 1:
                    _fail(node, "fire block owns exactly one internal tensor")
                if quantized and (node.out_qp is None or node.internal_qps[0] is None):
                    _fail(node, "fused block in an i8 graph is missing quantization parameters")
                dt = "i8" if quantized else "f32"
                define(node, node.internal_ids[0], (1, in_shape[1], in_shape[2], a.squeeze_channels), dt)
                define(node, node.output, (1, in_shape[1], in_shape[2], a.out_channels), dt)

            elif node.kind == "maxpool":
                wh, ww = node.attrs.window
                sh, sw = node.attrs.stride
                if wh > in_shape[1] or ww > in_shape[2]:
                    _fail(node, f"window {wh}x{ww} exceeds input {in_shape[1]}x{in_shape[2]}")
                ho = (in_shape[1] - wh) // sh + 1
                wo = (in_shape[2] - ww) // sw + 1
                define(node, node.output, (1, ho, wo, in_shape[3]), in_dtype)

            elif node.kind == "gap":
                out_dtype = "i8" if (quantized and node.out_qp is not None) else "f32"
                if quantized and node.out_qp is None:
                    _fail(node, "i8 average pool is missing output quantization parameters")
                define(node, node.output, (1, 1, 1, in_shape[3]), out_dtype)

            elif node.kind == "relu":
                define(node, node.output, in_shape, in_dtype)

            elif node.kind == "dense":
                w = _want_weight(graph, node, "w")
                _want_weight(graph, node, "b")
                if in_shape[1] != 1 or in_shape[2] != 1:
                    _fail(node, f"dense input must be flattened 1x1x1xK, got {in_shape}")
                if w.shape != (in_shape[3], node.attrs.units):
                    _fail(
                        node,
                        f"dense weights {w.shape} mismatch input K={in_shape[3]}, "
                        f"units {node.attrs.units}",
                    )
                out_dtype = "i8" if (quantized and node.out_qp is not None) else "f32"
                define(node, node.output, (1, 1, 1, node.attrs.units), out_dtype)

            elif node.kind == "flatten":
                define(node, node.output, (1, 1, 1, int(np.prod(in_shape))), in_dtype)

            elif node.kind == "softmax":
                if in_shape[:3] != (1, 1, 1):
                    _fail(node, f"softmax input must be 1x1x1xM, got {in_shape}")
                define(node, node.output, in_shape, "f32")
        except ValueError as e:
            if isinstance(e, GraphValidationError):
                raise
            _fail(node, str(e))

        rows.append((node.id, node.kind, shapes[node.output]))

    last = graph.nodes[-1]
    if last.kind != "softmax":
        raise GraphValidationError("graph must end with a softmax node")
    if shapes[last.output] != (1, 1, 1, graph.num_classes):
        raise GraphValidationError(
            f"final tensor shape {shapes[last.output]} is not (1, 1, 1, {graph.num_classes})"
        )
    if len(shapes) != graph.num_tensors:
        raise GraphValidationError(
            f"graph defines {len(shapes)} tensors but declares {graph.num_tensors}"
        )

    if graph.precision == "i8":
        _check_i8_extras(graph, dtypes)
    else:
        if graph.input_qp is not None:
            raise GraphValidationError("f32 graph must not carry input quantization")
        for name, t in graph.weights.items():
            if t.dtype != "f32":
                raise GraphValidationError(f"f32 graph holds non-f32 weight {name!r}")

    return ShapeReport(shapes, dtypes, rows)


def _check_i8_extras(graph, dtypes):
    """Weight dtype/qparams rules plus the pass-through and tail rules."""
    for node in graph.nodes:
        for role in WEIGHT_ROLES.get(node.kind, ()):
            t = graph.weights[weight_key(node.id, role)]
            if role.endswith(".b") or role == "b":
                if t.dtype != "i32":
                    _fail(node, f"bias {role} must be i32 in an i8 graph, got {t.dtype}")
            else:
                if t.dtype != "i8":
                    _fail(node, f"weights {role} must be i8 in an i8 graph, got {t.dtype}")
                if t.qparams.zero_point != 0:
                    _fail(node, f"weights {role} must be symmetric (zero_point 0)")
        if node.kind in PASSTHROUGH_KINDS and dtypes[node.inputs[0]] == "i8":
            if node.out_qp != _producer_qp(graph, node.inputs[0]):
                _fail(node, "pass-through output qparams must equal input qparams")
        if dtypes[node.output] == "i8" and node.out_qp is None:
            _fail(node, "i8 activation is missing quantization parameters")


def _producer_qp(graph, tid):
    """out_qp of the node producing tid (input_qp for the graph input)."""
    if tid == 0:
        return graph.input_qp
    for node in graph.nodes:
        if node.output == tid:
            return node.out_qp
        if tid in node.internal_ids:
            return node.internal_qps[node.internal_ids.index(tid)]
    raise KeyError(tid)


def _run(
    graph: ModelGraph,
    input_tensor: Tensor,
    observer: Optional[Callable[[int, Tensor], None]] = None,
) -> dict:
    """Execute all nodes in order; returns the full tensor-id -> Tensor map.

    `observer`, when given, is called for the input, every node output,
    and every fused-block internal activation.
    """
    values = {0: input_tensor}
    if observer is not None:
        observer(0, input_tensor)
    for node in graph.nodes:
        x = values[node.inputs[0]]
        internals = {} if node.internal_ids else None
        if node.kind == "conv2d":
            out = ops.conv2d(
                x,
                graph.weights[weight_key(node.id, "w")],
                graph.weights[weight_key(node.id, "b")],
                node.attrs,
                node.out_qp,
            )
        elif node.kind == "dwsep_block":
            out = ops.depthwise_separable_block(
                x,
                graph.weights[weight_key(node.id, "dw.w")],
                graph.weights[weight_key(node.id, "dw.b")],
                graph.weights[weight_key(node.id, "pw.w")],
                graph.weights[weight_key(node.id, "pw.b")],
                stride=node.attrs.stride,
                mid_qparams=node.internal_qps[0] if node.internal_qps else None,
                out_qparams=node.out_qp,
                internals=internals,
            )
            values[node.internal_ids[0]] = internals["mid"]
        elif node.kind == "channel_shuffle":
            out = ops.channel_shuffle(x, node.attrs.groups)
        elif node.kind == "fire":
            out = ops.fire(
                x,
                graph.weights[weight_key(node.id, "squeeze.w")],
                graph.weights[weight_key(node.id, "squeeze.b")],
                graph.weights[weight_key(node.id, "e1.w")],
                graph.weights[weight_key(node.id, "e1.b")],
                graph.weights[weight_key(node.id, "e3.w")],
                graph.weights[weight_key(node.id, "e3.b")],
                node.attrs,
                squeeze_qparams=node.internal_qps[0] if node.internal_qps else None,
                out_qparams=node.out_qp,
                internals=internals,
            )
            values[node.internal_ids[0]] = internals["squeeze"]
        elif node.kind == "maxpool":
            out = ops.maxpool2d(x, node.attrs.window, node.attrs.stride)
        elif node.kind == "gap":
            out = ops.global_avg_pool(x, node.out_qp if x.dtype == "i8" else None)
        elif node.kind == "relu":
            out = ops.relu(x)
        elif node.kind == "dense":
            out = ops.dense(
                x,
                graph.weights[weight_key(node.id, "w")],
                graph.weights[weight_key(node.id, "b")],
                node.out_qp,
            )
        elif node.kind == "flatten":
            out = ops.flatten(x)
        elif node.kind == "softmax":
            out = ops.softmax(x)
        else:
            raise GraphValidationError(f"cannot execute kind {node.kind!r}")
        values[node.output] = out
        if observer is not None:
            if internals:
                for tid in node.internal_ids:
                    observer(tid, values[tid])
            observer(node.output, out)
    return values


def prepare_input(graph: ModelGraph, input: Tensor) -> Tensor:
    """Check the input against the graph and auto-quantize f32 -> i8 if needed."""
    if input.shape != graph.input_shape:
        raise ValueError(f"input shape {input.shape} does not match {graph.input_shape}")
    if graph.precision == "i8":
        if input.dtype == "f32":
            return quantize(input, graph.input_qp)
        if input.dtype == "i8":
            return input
        raise ValueError(f"cannot feed {input.dtype} input to an i8 graph")
    if input.dtype != "f32":
        raise ValueError(f"cannot feed {input.dtype} input to an f32 graph")
    return input


def execute(graph: ModelGraph, input: Tensor) -> np.ndarray:
    """Forward pass; returns the 5 class probabilities as a float32 vector."""
    validate(graph)
    values = _run(graph, prepare_input(graph, input))
    return values[graph.nodes[-1].output].data.reshape(-1).copy()


def classify(graph: ModelGraph, input: Tensor):
    """(predicted label, probabilities); ties break toward the lowest index."""
    probs = execute(graph, input)
    return DRLabel(int(np.argmax(probs))), probs
