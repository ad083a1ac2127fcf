"""Deployment profiling: MACs, activation arena planning, ROM, latency.

The latency model is deliberately single-factor: a device class is an
effective throughput (MACs per millisecond) plus a fixed overhead, fitted
from observed (model, latency) anchor points. Memory-bound ops count zero
MACs; their cost is absorbed by the overhead term. ROM is not estimated
at all: it is the exact serialized model size, so the estimator can never
drift from the serializer.

RAM is the activation arena only (weights are ROM): tensor lifetimes come
from the topological order and offsets from greedy best-fit assignment in
decreasing size order, which is deterministic and near-optimal on the
chain-dominated graphs CNNs produce.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

from .graph import ModelGraph, ShapeReport, validate
from .model_io import serialize_model

DEVICE_ORDER = ("low-end MCU", "high-end MCU", "AI accelerator", "CPU", "GPU")


@dataclass(frozen=True)
class MacReport:
    per_node: dict  # node id -> multiply-accumulate count
    total: int
    output_bytes: dict  # node id -> output tensor bytes


@dataclass(frozen=True)
class MemoryPlan:
    arena_bytes: int
    # tensor id -> (offset, size, first_use_node, last_use_node)
    tensors: dict
    rom_bytes: int


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    throughput_macs_per_ms: float
    fixed_overhead_ms: float = 0.0

    def __post_init__(self):
        if self.throughput_macs_per_ms <= 0:
            raise ValueError("throughput must be positive")
        if self.fixed_overhead_ms < 0:
            raise ValueError("fixed overhead cannot be negative")


def _conv_macs(kernel, cin, groups, cout, out_hw) -> int:
    kh, kw = kernel
    return kh * kw * (cin // groups) * cout * out_hw[0] * out_hw[1]


def count_macs(graph: ModelGraph, report: Optional[ShapeReport] = None) -> MacReport:
    """Multiply-accumulate counts per node; pool/relu/shuffle count zero."""
    if report is None:
        report = validate(graph)
    per_node = {}
    out_bytes = {}
    for node in graph.nodes:
        in_shape = report.shapes[node.inputs[0]]
        out_shape = report.shapes[node.output]
        if node.kind == "conv2d":
            a = node.attrs
            macs = _conv_macs(a.kernel, in_shape[3], a.groups, a.out_channels, out_shape[1:3])
        elif node.kind == "dwsep_block":
            mid_shape = report.shapes[node.internal_ids[0]]
            dw = graph.weights[f"n{node.id}.dw.w"]
            macs = _conv_macs(dw.shape[:2], in_shape[3], in_shape[3], dw.shape[3], mid_shape[1:3])
            macs += _conv_macs((1, 1), mid_shape[3], 1, out_shape[3], out_shape[1:3])
        elif node.kind == "fire":
            a = node.attrs
            hw = (out_shape[1], out_shape[2])
            macs = _conv_macs((1, 1), in_shape[3], 1, a.squeeze_channels, hw)
            macs += _conv_macs((1, 1), a.squeeze_channels, 1, a.expand1_channels, hw)
            macs += _conv_macs((3, 3), a.squeeze_channels, 1, a.expand3_channels, hw)
        elif node.kind == "dense":
            macs = in_shape[3] * node.attrs.units
        else:
            macs = 0
        per_node[node.id] = int(macs)
        out_bytes[node.id] = report.tensor_bytes(node.output)
    return MacReport(per_node, sum(per_node.values()), out_bytes)


def tensor_intervals(graph: ModelGraph, report: Optional[ShapeReport] = None):
    """(tensor id, size bytes, first_use_node, last_use_node) for every tensor.

    A tensor is live from the node that produces it (node 0 for the graph
    input) through its last consumer; fused-block internals live only at
    their owning node; the graph output lives to the last node.
    """
    if report is None:
        report = validate(graph)
    n = len(graph.nodes)
    first = {0: 0}
    last = {0: 0}
    for idx, node in enumerate(graph.nodes):
        for tid in node.inputs:
            last[tid] = max(last.get(tid, idx), idx)
        first[node.output] = idx
        last[node.output] = idx
        for tid in node.internal_ids:
            first[tid] = idx
            last[tid] = idx
    last[graph.nodes[-1].output] = n - 1
    return [
        (tid, report.tensor_bytes(tid), first[tid], last[tid]) for tid in sorted(first)
    ]


def _as_chain(items):
    """Order items as a linear lifetime chain, or None if they are not one.

    A chain means: sorted by lifetime, every item overlaps exactly its
    neighbours. Plain layer stacks produce this shape.
    """
    if len(items) < 2:
        return None
    order = sorted(items, key=lambda it: (it[2], it[3], str(it[0])))
    for i in range(len(order)):
        for j in range(i + 1, len(order)):
            overlaps = max(order[i][2], order[j][2]) <= min(order[i][3], order[j][3])
            if overlaps != (j == i + 1):
                return None
    return order


def _pack_chain(order):
    """Alternating placement, exact peak usage on chains.

    Even-position items sit at offset 0; each odd item sits just above
    the larger of its two neighbours, so every adjacent pair occupies
    max(adjacent sums) = peak live bytes. Greedy best-fit alone can
    overshoot the peak on adversarial chain sizes, which would break the
    peak-equality guarantee for plain layer stacks.
    """
    offsets = {}
    arena = 0
    for i, (key, size, _, _) in enumerate(order):
        if i % 2 == 0:
            off = 0
        else:
            after = order[i + 1][1] if i + 1 < len(order) else 0
            off = max(order[i - 1][1], after)
        offsets[key] = off
        arena = max(arena, off + size)
    return offsets, arena


def pack_best_fit(items: Iterable[tuple]) -> tuple:
    """Deterministic offset assignment over (key, size, first, last) items.

    Chain-shaped lifetimes use the exact alternating layout; everything
    else is greedy best-fit in decreasing size order: each item goes into
    the smallest gap between already-placed lifetime-overlapping items
    that fits it, else at the end. Returns (offsets dict, arena size).
    """
    items = list(items)
    chain = _as_chain(items)
    if chain is not None:
        return _pack_chain(chain)
    order = sorted(enumerate(items), key=lambda kv: (-kv[1][1], kv[0]))
    placed = []  # (offset, size, first, last), kept sorted by offset
    offsets = {}
    arena = 0
    for _, (key, size, first, last) in order:
        prev_end = 0
        best = None
        best_gap = None
        for off, sz, f, l in placed:
            if max(first, f) <= min(last, l):  # lifetimes overlap
                gap = off - prev_end
                if gap >= size and (best_gap is None or gap < best_gap):
                    best, best_gap = prev_end, gap
                prev_end = max(prev_end, off + sz)
        offset = best if best is not None else prev_end
        offsets[key] = offset
        arena = max(arena, offset + size)
        placed.append((offset, size, first, last))
        placed.sort()
    return offsets, arena


def peak_live_bytes(items) -> int:
    """Max over time steps of the summed sizes of simultaneously live items."""
    steps = {t for _, _, first, last in items for t in (first, last)}
    return max(
        (sum(size for _, size, f, l in items if f <= t <= l) for t in sorted(steps)),
        default=0,
    )


def plan_memory(graph: ModelGraph) -> MemoryPlan:
    """Static arena plan for all activations plus the exact ROM size."""
    report = validate(graph)
    items = tensor_intervals(graph, report)
    offsets, arena = pack_best_fit(items)
    tensors = {
        tid: (offsets[tid], size, first, last) for tid, size, first, last in items
    }
    return MemoryPlan(arena, tensors, estimate_rom(graph))


def estimate_rom(graph: ModelGraph) -> int:
    """Exactly the serialized model file size, by construction."""
    return len(serialize_model(graph))


def fit_device_profiles(
    anchors: Iterable[tuple], fixed_overhead_ms: float = 0.0
) -> dict:
    """Fit per-device throughput from (graph, device_name, observed_ms) anchors.

    throughput = MACs / (observed - overhead) per anchor, averaged per
    device when a device has several anchors.
    """
    samples = {}
    for graph_, device, observed_ms in anchors:
        if observed_ms <= fixed_overhead_ms:
            raise ValueError(
                f"anchor for {device!r}: latency {observed_ms} ms does not exceed "
                f"the fixed overhead {fixed_overhead_ms} ms"
            )
        macs = count_macs(graph_).total
        samples.setdefault(device, []).append(macs / (observed_ms - fixed_overhead_ms))
    if not samples:
        raise ValueError("no anchors given")
    return {
        device: DeviceProfile(device, sum(tp) / len(tp), fixed_overhead_ms)
        for device, tp in samples.items()
    }


def estimate_latency(graph: ModelGraph, profile: DeviceProfile) -> float:
    """total MACs / throughput + fixed overhead, in milliseconds."""
    return count_macs(graph).total / profile.throughput_macs_per_ms + profile.fixed_overhead_ms


def save_profiles(profiles: dict, path, header_lines: Iterable[str] = ()) -> None:
    """Write a tab-separated device profile file (name, throughput, overhead)."""
    lines = [f"# {line}" for line in header_lines]
    lines.append("# device\tthroughput_macs_per_ms\toverhead_ms")
    for p in profiles.values():
        lines.append(f"{p.name}\t{p.throughput_macs_per_ms!r}\t{p.fixed_overhead_ms!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_profiles(path) -> dict:
    """Parse a device profile file into an ordered name -> DeviceProfile map."""
    profiles = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        name, throughput, overhead = fields
        profiles[name] = DeviceProfile(name, float(throughput), float(overhead))
    if not profiles:
        raise ValueError(f"{path}: no device profiles found")
    return profiles


def paper_profiles() -> dict:
    """The bundled device profiles fitted from published latency anchors."""
    ref = resources.files("edgedr").joinpath("profiles/paper.profile")
    with resources.as_file(ref) as path:
        return load_profiles(path)
