"""Bit-exact binary model files.

Layout (all little-endian):
  header   magic "EDRM", version u16, precision u8 (0=f32, 1=i8),
           reserved u8, node count u32, weight count u32
  nodes    kind u8, fixed-width attr record per kind,
           input count u8 + input ids u32 each, output id u32
  weights  name len u16 + UTF-8 name, dtype u8, rank u8, dims u32 x rank,
           qparams flag u8 (+ scale f32 + zero_point i32), raw payload
  trailer  CRC32 of everything before it, u32

Quantization parameters ride inside the per-kind attr records (flag +
scale + zero point, zeroed in f32 files, so records stay fixed-width).
Two reserved weight entries carry graph-level state: "__labels__" pins
the class order against reordering bugs and "__input__" holds the input
quantization of i8 graphs. Saving is deterministic: save -> load -> save
reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import (
    DenseAttrs,
    DRLabel,
    DwSepAttrs,
    ModelGraph,
    OpNode,
    PoolAttrs,
    ShuffleAttrs,
    validate,
)
from .ops import ConvAttrs, FireAttrs
from .tensor import QuantParams, Tensor

MAGIC = b"EDRM"
VERSION = 1

KIND_CODES = {
    "conv2d": 0,
    "dwsep_block": 1,
    "channel_shuffle": 2,
    "fire": 3,
    "maxpool": 4,
    "gap": 5,
    "relu": 6,
    "dense": 7,
    "flatten": 8,
    "softmax": 9,
}
KIND_FROM_CODE = {v: k for k, v in KIND_CODES.items()}

DTYPE_CODES = {"f32": 0, "i8": 1, "i32": 2}
DTYPE_FROM_CODE = {v: k for k, v in DTYPE_CODES.items()}

PADDING_CODES = {"valid": 0, "same": 1}
PADDING_FROM_CODE = {v: k for k, v in PADDING_CODES.items()}

LABELS_ENTRY = "__labels__"
INPUT_ENTRY = "__input__"
LABELS_PAYLOAD = ",".join(l.name for l in DRLabel).encode("utf-8")

_QP = struct.Struct("<Bfi")


class ModelFormatError(ValueError):
    pass


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


def _pack_qp(qp: Optional[QuantParams]) -> bytes:
    if qp is None:
        return _QP.pack(0, 0.0, 0)
    return _QP.pack(1, qp.scale, qp.zero_point)


def _unpack_qp(c: "_Cursor") -> Optional[QuantParams]:
    flag, scale, zp = c.unpack(_QP)
    if flag == 0:
        return None
    return QuantParams(float(np.float32(scale)), zp)


class _Cursor:
    """Bounds-checked reader; running past the end means a truncated file."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"needed {n} bytes at offset {self.pos}, file ends at {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.read(st.size))


def _serialize_node(node: OpNode) -> bytes:
    out = [struct.pack("<B", KIND_CODES[node.kind])]
    a = node.attrs
    if node.kind == "conv2d":
        out.append(
            struct.pack(
                "<HHHHBII",
                *a.kernel,
                *a.stride,
                PADDING_CODES[a.padding],
                a.groups,
                a.out_channels,
            )
        )
        out.append(_pack_qp(node.out_qp))
    elif node.kind == "dwsep_block":
        out.append(struct.pack("<HHII", *a.stride, a.out_channels, node.internal_ids[0]))
        out.append(_pack_qp(node.internal_qps[0]))
        out.append(_pack_qp(node.out_qp))
    elif node.kind == "channel_shuffle":
        out.append(struct.pack("<I", a.groups))
        out.append(_pack_qp(node.out_qp))
    elif node.kind == "fire":
        out.append(
            struct.pack(
                "<IIII",
                a.squeeze_channels,
                a.expand1_channels,
                a.expand3_channels,
                node.internal_ids[0],
            )
        )
        out.append(_pack_qp(node.internal_qps[0]))
        out.append(_pack_qp(node.out_qp))
    elif node.kind == "maxpool":
        out.append(struct.pack("<HHHH", *a.window, *a.stride))
        out.append(_pack_qp(node.out_qp))
    elif node.kind == "dense":
        out.append(struct.pack("<I", a.units))
        out.append(_pack_qp(node.out_qp))
    elif node.kind in ("gap", "relu", "flatten"):
        out.append(_pack_qp(node.out_qp))
    elif node.kind == "softmax":
        pass
    else:
        raise ModelFormatError(f"cannot serialize kind {node.kind!r}")
    out.append(struct.pack("<B", len(node.inputs)))
    out.append(struct.pack(f"<{len(node.inputs)}I", *node.inputs))
    out.append(struct.pack("<I", node.output))
    return b"".join(out)


def _deserialize_node(c: _Cursor, node_id: int) -> OpNode:
    (code,) = c.unpack(struct.Struct("<B"))
    if code not in KIND_FROM_CODE:
        raise ModelFormatError(f"unknown node kind code {code}")
    kind = KIND_FROM_CODE[code]
    attrs = None
    out_qp = None
    internal_ids = ()
    internal_qps = ()
    if kind == "conv2d":
        kh, kw, sh, sw, pad, groups, cout = c.unpack(struct.Struct("<HHHHBII"))
        if pad not in PADDING_FROM_CODE:
            raise ModelFormatError(f"unknown padding code {pad}")
        attrs = ConvAttrs((kh, kw), (sh, sw), PADDING_FROM_CODE[pad], groups, cout)
        out_qp = _unpack_qp(c)
    elif kind == "dwsep_block":
        sh, sw, cout, mid = c.unpack(struct.Struct("<HHII"))
        attrs = DwSepAttrs((sh, sw), cout)
        internal_ids = (mid,)
        internal_qps = (_unpack_qp(c),)
        out_qp = _unpack_qp(c)
    elif kind == "channel_shuffle":
        (groups,) = c.unpack(struct.Struct("<I"))
        attrs = ShuffleAttrs(groups)
        out_qp = _unpack_qp(c)
    elif kind == "fire":
        sq, e1, e3, mid = c.unpack(struct.Struct("<IIII"))
        attrs = FireAttrs(sq, e1, e3)
        internal_ids = (mid,)
        internal_qps = (_unpack_qp(c),)
        out_qp = _unpack_qp(c)
    elif kind == "maxpool":
        wh, ww, sh, sw = c.unpack(struct.Struct("<HHHH"))
        attrs = PoolAttrs((wh, ww), (sh, sw))
        out_qp = _unpack_qp(c)
    elif kind == "dense":
        (units,) = c.unpack(struct.Struct("<I"))
        attrs = DenseAttrs(units)
        out_qp = _unpack_qp(c)
    elif kind in ("gap", "relu", "flatten"):
        out_qp = _unpack_qp(c)
    (n_inputs,) = c.unpack(struct.Struct("<B"))
    inputs = list(c.unpack(struct.Struct(f"<{n_inputs}I")))
    (output,) = c.unpack(struct.Struct("<I"))
    return OpNode(node_id, kind, attrs, inputs, output, out_qp, internal_ids, internal_qps)


def _serialize_weight(name: str, dtype: str, dims, qp: Optional[QuantParams], payload: bytes):
    enc = name.encode("utf-8")
    out = [struct.pack("<H", len(enc)), enc]
    out.append(struct.pack("<BB", DTYPE_CODES[dtype], len(dims)))
    out.append(struct.pack(f"<{len(dims)}I", *dims))
    out.append(_pack_qp(qp))
    out.append(payload)
    return b"".join(out)


_NUMPY_BY_DTYPE = {"f32": np.dtype("<f4"), "i8": np.dtype("<i1"), "i32": np.dtype("<i4")}


def _deserialize_weight(c: _Cursor):
    (name_len,) = c.unpack(struct.Struct("<H"))
    name = c.read(name_len).decode("utf-8")
    dtype_code, rank = c.unpack(struct.Struct("<BB"))
    if dtype_code not in DTYPE_FROM_CODE:
        raise ModelFormatError(f"unknown dtype code {dtype_code} for weight {name!r}")
    dims = tuple(c.unpack(struct.Struct(f"<{rank}I")))
    qp = _unpack_qp(c)
    dtype = DTYPE_FROM_CODE[dtype_code]
    count = int(np.prod(dims)) if dims else 1
    payload = c.read(count * _NUMPY_BY_DTYPE[dtype].itemsize)
    return name, dtype, dims, qp, payload


def serialize_model(graph: ModelGraph) -> bytes:
    """Graph -> bytes. Validates first; output is a pure function of the graph."""
    validate(graph)
    out = [
        MAGIC,
        struct.pack(
            "<HBBII",
            VERSION,
            1 if graph.precision == "i8" else 0,
            0,
            len(graph.nodes),
            len(graph.weights) + 1 + (1 if graph.input_qp is not None else 0),
        ),
    ]
    for node in graph.nodes:
        out.append(_serialize_node(node))
    out.append(
        _serialize_weight(LABELS_ENTRY, "i8", (len(LABELS_PAYLOAD),), None, LABELS_PAYLOAD)
    )
    if graph.input_qp is not None:
        out.append(_serialize_weight(INPUT_ENTRY, "i8", (0,), graph.input_qp, b""))
    for name, t in graph.weights.items():
        arr = np.ascontiguousarray(t.data, dtype=_NUMPY_BY_DTYPE[t.dtype])
        out.append(_serialize_weight(name, t.dtype, t.shape, t.qparams, arr.tobytes()))
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_model(graph: ModelGraph, path) -> None:
    Path(path).write_bytes(serialize_model(graph))


def deserialize_model(data: bytes, name: str = "model") -> ModelGraph:
    if len(data) < 16:
        raise TruncatedFileError(f"file is only {len(data)} bytes")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    c = _Cursor(data[:-4])
    c.pos = 4
    version, precision_code, _reserved, n_nodes, n_weights = c.unpack(
        struct.Struct("<HBBII")
    )
    if version != VERSION:
        raise UnsupportedVersionError(f"format version {version}, supported {VERSION}")
    if precision_code not in (0, 1):
        raise ModelFormatError(f"unknown precision code {precision_code}")

    nodes = [_deserialize_node(c, i) for i in range(n_nodes)]
    records = [_deserialize_weight(c) for _ in range(n_weights)]

    if c.pos != len(data) - 4:
        raise ModelFormatError(
            f"{len(data) - 4 - c.pos} unexpected trailing bytes before the checksum"
        )
    (stored_crc,) = struct.unpack("<I", data[-4:])
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise ChecksumError(f"checksum {actual_crc:#010x} != stored {stored_crc:#010x}")

    weights = {}
    input_qp = None
    saw_labels = False
    for wname, dtype, dims, qp, payload in records:
        if wname == LABELS_ENTRY:
            if payload != LABELS_PAYLOAD:
                raise ModelFormatError(
                    f"label order {payload!r} does not match {LABELS_PAYLOAD!r}"
                )
            saw_labels = True
            continue
        if wname == INPUT_ENTRY:
            if qp is None:
                raise ModelFormatError("input quantization entry lacks parameters")
            input_qp = qp
            continue
        arr = np.frombuffer(payload, dtype=_NUMPY_BY_DTYPE[dtype]).reshape(dims)
        weights[wname] = Tensor(dims, dtype, arr.copy(), qp)
    if not saw_labels:
        raise ModelFormatError("model file does not carry the label enumeration")

    num_tensors = 1 + sum(1 + len(n.internal_ids) for n in nodes)
    graph = ModelGraph(
        name=name,
        precision="i8" if precision_code == 1 else "f32",
        nodes=nodes,
        weights=weights,
        num_tensors=num_tensors,
        input_qp=input_qp,
    )
    validate(graph)
    return graph


def load_model(path) -> ModelGraph:
    data = Path(path).read_bytes()
    return deserialize_model(data, name=Path(path).stem)
