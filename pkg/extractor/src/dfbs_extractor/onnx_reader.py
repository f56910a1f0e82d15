"""Minimal ONNX model reader built directly on the protobuf wire format.

Parses only the ModelProto subset the extractor needs: the graph's nodes
(op type, inputs, outputs, int/float attributes), initializer tensors and
graph output names. No protobuf runtime or onnx package required.

Field numbers (stable across ONNX releases):
    ModelProto.graph = 7
    GraphProto.node = 1, .initializer = 5, .input = 11, .output = 12
    NodeProto.input = 1, .output = 2, .name = 3, .op_type = 4, .attribute = 5
    AttributeProto.name = 1, .f = 2, .i = 3
    TensorProto.dims = 1, .data_type = 2, .float_data = 4, .name = 8, .raw_data = 9
    ValueInfoProto.name = 1
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from dfbs_extractor.errors import MalformedCheckpoint, UnsupportedDtype

# TensorProto.DataType values
DT_FLOAT = 1
DT_UINT8 = 2
DT_INT8 = 3
DT_INT32 = 6
DT_INT64 = 7
DT_DOUBLE = 11

_DTYPE_NAMES = {
    DT_FLOAT: "float32",
    DT_UINT8: "uint8",
    DT_INT8: "int8",
    DT_INT32: "int32",
    DT_INT64: "int64",
    DT_DOUBLE: "float64",
}


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise MalformedCheckpoint("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise MalformedCheckpoint("varint too long")


def _fields(buf: bytes):
    """Yield (field_number, wire_type, value) triples of one message."""
    pos = 0
    while pos < len(buf):
        key, pos = _read_varint(buf, pos)
        number, wtype = key >> 3, key & 7
        if wtype == 0:
            value, pos = _read_varint(buf, pos)
        elif wtype == 1:
            value, pos = buf[pos : pos + 8], pos + 8
        elif wtype == 2:
            length, pos = _read_varint(buf, pos)
            value, pos = buf[pos : pos + length], pos + length
            if len(value) != length:
                raise MalformedCheckpoint("truncated length-delimited field")
        elif wtype == 5:
            value, pos = buf[pos : pos + 4], pos + 4
        else:
            raise MalformedCheckpoint(f"unsupported wire type {wtype}")
        yield number, wtype, value


def _packed_varints(buf: bytes) -> list[int]:
    out = []
    pos = 0
    while pos < len(buf):
        v, pos = _read_varint(buf, pos)
        out.append(v)
    return out


@dataclass
class Tensor:
    name: str
    dims: tuple[int, ...]
    data_type: int
    raw_data: bytes = b""
    float_data: list[float] = field(default_factory=list)

    @property
    def dtype_name(self) -> str:
        return _DTYPE_NAMES.get(self.data_type, f"datatype_{self.data_type}")

    def to_array(self) -> np.ndarray:
        if self.data_type == DT_FLOAT:
            if self.raw_data:
                arr = np.frombuffer(self.raw_data, dtype="<f4")
            else:
                arr = np.array(self.float_data, dtype=np.float32)
        else:
            raise UnsupportedDtype(
                f"initializer {self.name!r} has dtype {self.dtype_name}; "
                "only float32 ONNX heads are supported"
            )
        expected = int(np.prod(self.dims)) if self.dims else arr.size
        if arr.size != expected:
            raise MalformedCheckpoint(
                f"initializer {self.name!r}: {arr.size} values for dims {self.dims}"
            )
        return arr.reshape(self.dims)


@dataclass
class Node:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    attrs_i: dict[str, int]
    attrs_f: dict[str, float]


@dataclass
class Graph:
    nodes: list[Node]
    initializers: dict[str, Tensor]
    outputs: list[str]
    inputs: list[str]


def _parse_tensor(buf: bytes) -> Tensor:
    t = Tensor(name="", dims=(), data_type=0)
    dims: list[int] = []
    floats: list[float] = []
    for number, wtype, value in _fields(buf):
        if number == 1:
            if wtype == 0:
                dims.append(value)
            else:
                dims.extend(_packed_varints(value))
        elif number == 2 and wtype == 0:
            t.data_type = value
        elif number == 4:
            if wtype == 5:
                floats.append(struct.unpack("<f", value)[0])
            else:
                floats.extend(
                    struct.unpack(f"<{len(value) // 4}f", value)
                )
        elif number == 8 and wtype == 2:
            t.name = value.decode("utf-8", "replace")
        elif number == 9 and wtype == 2:
            t.raw_data = value
    t.dims = tuple(dims)
    t.float_data = floats
    return t


def _parse_attribute(buf: bytes) -> tuple[str, int | None, float | None]:
    name, ival, fval = "", None, None
    for number, wtype, value in _fields(buf):
        if number == 1 and wtype == 2:
            name = value.decode("utf-8", "replace")
        elif number == 3 and wtype == 0:
            ival = value
        elif number == 2 and wtype == 5:
            fval = struct.unpack("<f", value)[0]
    return name, ival, fval


def _parse_node(buf: bytes) -> Node:
    node = Node(op_type="", inputs=[], outputs=[], attrs_i={}, attrs_f={})
    for number, wtype, value in _fields(buf):
        if number == 1 and wtype == 2:
            node.inputs.append(value.decode("utf-8", "replace"))
        elif number == 2 and wtype == 2:
            node.outputs.append(value.decode("utf-8", "replace"))
        elif number == 4 and wtype == 2:
            node.op_type = value.decode("utf-8", "replace")
        elif number == 5 and wtype == 2:
            name, ival, fval = _parse_attribute(value)
            if ival is not None:
                node.attrs_i[name] = ival
            if fval is not None:
                node.attrs_f[name] = fval
    return node


def _value_info_name(buf: bytes) -> str:
    for number, wtype, value in _fields(buf):
        if number == 1 and wtype == 2:
            return value.decode("utf-8", "replace")
    return ""


def _parse_graph(buf: bytes) -> Graph:
    graph = Graph(nodes=[], initializers={}, outputs=[], inputs=[])
    for number, wtype, value in _fields(buf):
        if number == 1 and wtype == 2:
            graph.nodes.append(_parse_node(value))
        elif number == 5 and wtype == 2:
            tensor = _parse_tensor(value)
            graph.initializers[tensor.name] = tensor
        elif number == 11 and wtype == 2:
            graph.inputs.append(_value_info_name(value))
        elif number == 12 and wtype == 2:
            graph.outputs.append(_value_info_name(value))
    return graph


def load_onnx_graph(data: bytes) -> Graph:
    """Parse the graph out of serialized ONNX ModelProto bytes."""
    graph = None
    try:
        for number, wtype, value in _fields(data):
            if number == 7 and wtype == 2:
                graph = _parse_graph(value)
    except MalformedCheckpoint:
        raise
    except Exception as exc:
        raise MalformedCheckpoint(f"cannot parse ONNX protobuf: {exc}") from exc
    if graph is None:
        raise MalformedCheckpoint("no graph in ONNX model")
    return graph
