"""Post-training int8 conversion and float-vs-quantized fidelity reporting.

Calibration runs the f32 graph over sample inputs and records exact
min/max per activation (every inter-node tensor, every fused-block
internal, and the input itself). min/max merging is associative and
commutative, so sample order never matters and shards can be merged.

Conversion quantizes weights symmetrically per tensor and activations
asymmetrically from the observed ranges. Quantization-exact ops (relu,
pooling, shuffle, flatten) inherit their input parameters instead of
re-deriving them, so they stay rounding-free. The last weighted node is
left dequantizing (f32 logits), and every requantization factor is
checked to lie in (0, 1) up front so a pathological calibration is
reported against the offending node rather than failing mid-inference.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .graph import (
    PASSTHROUGH_KINDS,
    WEIGHT_ROLES,
    ModelGraph,
    _run,
    classify,
    prepare_input,
    validate,
    weight_key,
)
from .model_io import serialize_model
from .tensor import (
    QuantParams,
    RangeObservation,
    Tensor,
    observe,
    qparams_from_range,
    quantize,
    requant_multiplier,
    round_half_away,
)

WEIGHTED_KINDS = ("conv2d", "dense", "dwsep_block", "fire")


class CalibrationError(ValueError):
    pass


def calibrate(graph: ModelGraph, samples: Iterable[Tensor]) -> dict:
    """Observed value range per tensor id over all calibration samples."""
    if graph.precision != "f32":
        raise CalibrationError("calibration runs on the f32 graph")
    validate(graph)
    ranges = {}

    def record(tid, tensor):
        ranges[tid] = observe(tensor, ranges.get(tid, RangeObservation()))

    n = 0
    for sample in samples:
        n += 1
        _run(graph, prepare_input(graph, sample), observer=record)
    if n == 0:
        raise CalibrationError("calibration needs at least one sample")
    return ranges


def merge_range_maps(a: dict, b: dict) -> dict:
    """Merge two calibration shards; associative and commutative."""
    out = dict(a)
    for tid, obs in b.items():
        out[tid] = out.get(tid, RangeObservation()).merge(obs)
    return out


def _act_qp(ranges, tid) -> QuantParams:
    obs = ranges[tid]
    return qparams_from_range(obs.min, obs.max)


def _quantize_weight(t: Tensor) -> Tensor:
    qp = qparams_from_range(float(t.data.min()), float(t.data.max()), symmetric=True)
    return quantize(t, qp)


def _quantize_bias(t: Tensor, s_in: float, s_w: float) -> Tensor:
    scale = s_in * s_w
    q = round_half_away(t.data.astype(np.float64) / scale)
    assert np.abs(q).max(initial=0) < 1 << 31, "bias exceeds the int32 envelope"
    return Tensor(t.shape, "i32", q.astype(np.int32), QuantParams(float(np.float32(scale)), 0))


def _check_multiplier(node, label, s_in, s_w, s_out):
    try:
        requant_multiplier(s_in, s_w, s_out)
    except ValueError as e:
        raise CalibrationError(f"node {node.id} ({node.kind}) {label}: {e}") from e


def _requant_target(node, label, obs, out_qp, scale_pairs):
    """Output qparams for a requantizing edge, with every factor in (0, 1).

    A degenerate output range (all observed values exactly 0) pins the
    scale at 1 by the degenerate rule, which can push a factor to >= 1 in
    all-zero chains even though every code is just the zero point. Such
    edges get their output scale widened instead of failing; a factor out
    of range on a live range is a real calibration pathology and is
    reported against the node.
    """
    worst = max(s_in * s_w for s_in, s_w in scale_pairs)
    if obs.count > 0 and obs.min == 0.0 and obs.max == 0.0 and worst / out_qp.scale >= 1.0:
        out_qp = QuantParams(float(np.float32(2.0 * worst)), 0)
    for s_in, s_w in scale_pairs:
        _check_multiplier(node, label, s_in, s_w, out_qp.scale)
    return out_qp


def quantize_graph(graph: ModelGraph, ranges: dict) -> ModelGraph:
    """f32 graph + calibration ranges -> executable i8 graph."""
    if graph.precision != "f32":
        raise CalibrationError("graph is already quantized")
    report = validate(graph)
    for tid in range(graph.num_tensors):
        if tid not in ranges or ranges[tid].count == 0:
            raise CalibrationError(f"calibration range missing for tensor {tid}")

    weighted = [i for i, n in enumerate(graph.nodes) if n.kind in WEIGHTED_KINDS]
    if not weighted:
        raise CalibrationError("graph has no weighted nodes to quantize")
    head = weighted[-1]
    if graph.nodes[head].kind not in ("conv2d", "dense"):
        raise CalibrationError("the final weighted node must be a conv or dense layer")

    tensor_qp = {0: _act_qp(ranges, 0)}
    new_nodes = []
    new_weights = {}

    def put_weight(node, role, tensor):
        new_weights[weight_key(node.id, role)] = tensor

    for idx, node in enumerate(graph.nodes):
        in_qp = tensor_qp.get(node.inputs[0])
        in_float = in_qp is None  # inside the f32 classifier tail
        out_qp = None
        internal_qps = node.internal_qps

        if node.kind in PASSTHROUGH_KINDS:
            out_qp = in_qp
        elif node.kind == "gap":
            if not in_float:
                h, w = report.shapes[node.inputs[0]][1:3]
                out_qp = _requant_target(
                    node, "average", ranges[node.output],
                    _act_qp(ranges, node.output), [(in_qp.scale, 1.0 / (h * w))],
                )
        elif node.kind in ("conv2d", "dense"):
            w = graph.weights[weight_key(node.id, "w")]
            qw = _quantize_weight(w)
            put_weight(node, "w", qw)
            put_weight(
                node, "b",
                _quantize_bias(graph.weights[weight_key(node.id, "b")], in_qp.scale, qw.qparams.scale),
            )
            if idx != head:
                out_qp = _requant_target(
                    node, "requant", ranges[node.output],
                    _act_qp(ranges, node.output), [(in_qp.scale, qw.qparams.scale)],
                )
        elif node.kind == "dwsep_block":
            dw = _quantize_weight(graph.weights[weight_key(node.id, "dw.w")])
            pw = _quantize_weight(graph.weights[weight_key(node.id, "pw.w")])
            mid_qp = _requant_target(
                node, "depthwise", ranges[node.internal_ids[0]],
                _act_qp(ranges, node.internal_ids[0]), [(in_qp.scale, dw.qparams.scale)],
            )
            out_qp = _requant_target(
                node, "pointwise", ranges[node.output],
                _act_qp(ranges, node.output), [(mid_qp.scale, pw.qparams.scale)],
            )
            put_weight(node, "dw.w", dw)
            put_weight(
                node, "dw.b",
                _quantize_bias(graph.weights[weight_key(node.id, "dw.b")], in_qp.scale, dw.qparams.scale),
            )
            put_weight(node, "pw.w", pw)
            put_weight(
                node, "pw.b",
                _quantize_bias(graph.weights[weight_key(node.id, "pw.b")], mid_qp.scale, pw.qparams.scale),
            )
            internal_qps = (mid_qp,)
        elif node.kind == "fire":
            sq = _quantize_weight(graph.weights[weight_key(node.id, "squeeze.w")])
            e1 = _quantize_weight(graph.weights[weight_key(node.id, "e1.w")])
            e3 = _quantize_weight(graph.weights[weight_key(node.id, "e3.w")])
            sq_qp = _requant_target(
                node, "squeeze", ranges[node.internal_ids[0]],
                _act_qp(ranges, node.internal_ids[0]), [(in_qp.scale, sq.qparams.scale)],
            )
            # both expand branches write one output tensor, so its observed
            # range already is the union of the branch ranges
            out_qp = _requant_target(
                node, "expand", ranges[node.output], _act_qp(ranges, node.output),
                [(sq_qp.scale, e1.qparams.scale), (sq_qp.scale, e3.qparams.scale)],
            )
            put_weight(node, "squeeze.w", sq)
            put_weight(
                node, "squeeze.b",
                _quantize_bias(graph.weights[weight_key(node.id, "squeeze.b")], in_qp.scale, sq.qparams.scale),
            )
            put_weight(node, "e1.w", e1)
            put_weight(
                node, "e1.b",
                _quantize_bias(graph.weights[weight_key(node.id, "e1.b")], sq_qp.scale, e1.qparams.scale),
            )
            put_weight(node, "e3.w", e3)
            put_weight(
                node, "e3.b",
                _quantize_bias(graph.weights[weight_key(node.id, "e3.b")], sq_qp.scale, e3.qparams.scale),
            )
            internal_qps = (sq_qp,)

        tensor_qp[node.output] = out_qp
        new_nodes.append(replace(node, out_qp=out_qp, internal_qps=internal_qps))

    # keep the original weight-map order for byte-stable serialization
    ordered = {name: new_weights.get(name) for name in graph.weights}
    for name, t in ordered.items():
        if t is None:
            raise CalibrationError(f"weight {name!r} was not converted")

    quantized = ModelGraph(
        name=graph.name,
        precision="i8",
        nodes=new_nodes,
        weights=ordered,
        num_tensors=graph.num_tensors,
        input_qp=tensor_qp[0],
    )
    validate(quantized)
    return quantized


@dataclass(frozen=True)
class QuantReport:
    """Float-vs-quantized comparison over a sample set."""

    agreement: float  # fraction of samples with matching top-1
    max_logit_error: float
    per_layer_unit_error: dict  # node id -> max |quantized unit| difference
    f32_bytes: int
    i8_bytes: int

    def summary(self) -> str:
        worst = max(self.per_layer_unit_error.values(), default=0)
        return (
            f"top-1 agreement {self.agreement:.3f}, "
            f"max logit error {self.max_logit_error:.6g}, "
            f"worst per-layer error {worst} unit(s), "
            f"size {self.f32_bytes} -> {self.i8_bytes} bytes"
        )


def _as_real(tensor: Tensor) -> np.ndarray:
    if tensor.dtype == "i8":
        qp = tensor.qparams
        return (tensor.data.astype(np.float64) - qp.zero_point) * qp.scale
    return tensor.data.astype(np.float64)


def fidelity_report(
    ref_graph: ModelGraph, quant_graph: ModelGraph, samples: Iterable[Tensor]
) -> QuantReport:
    """Run both graphs over the samples and compare heads and layers."""
    if len(ref_graph.nodes) != len(quant_graph.nodes) or any(
        a.kind != b.kind for a, b in zip(ref_graph.nodes, quant_graph.nodes)
    ):
        raise ValueError("graphs do not share node structure")
    validate(ref_graph)
    validate(quant_graph)

    logits_tid = quant_graph.nodes[-1].inputs[0]
    agree = 0
    total = 0
    max_logit = 0.0
    per_layer = {}
    for sample in samples:
        total += 1
        ref_vals = _run(ref_graph, prepare_input(ref_graph, sample))
        q_vals = _run(quant_graph, prepare_input(quant_graph, sample))
        ref_probs = ref_vals[ref_graph.nodes[-1].output].data.reshape(-1)
        q_probs = q_vals[quant_graph.nodes[-1].output].data.reshape(-1)
        if int(np.argmax(ref_probs)) == int(np.argmax(q_probs)):
            agree += 1
        diff = np.abs(_as_real(ref_vals[logits_tid]) - _as_real(q_vals[logits_tid]))
        max_logit = max(max_logit, float(diff.max()))
        for node in quant_graph.nodes:
            if node.out_qp is None:
                continue
            ref_q = quantize(
                Tensor.from_array(_as_real(ref_vals[node.output]).astype(np.float32)),
                node.out_qp,
            )
            units = int(
                np.abs(
                    ref_q.data.astype(np.int32) - q_vals[node.output].data.astype(np.int32)
                ).max(initial=0)
            )
            per_layer[node.id] = max(per_layer.get(node.id, 0), units)
    if total == 0:
        raise ValueError("fidelity comparison needs at least one sample")
    return QuantReport(
        agreement=agree / total,
        max_logit_error=max_logit,
        per_layer_unit_error=per_layer,
        f32_bytes=len(serialize_model(ref_graph)),
        i8_bytes=len(serialize_model(quant_graph)),
    )
