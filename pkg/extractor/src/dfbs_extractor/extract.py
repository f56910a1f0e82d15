"""Final-layer extraction from framework checkpoints.

Supported sources:

* **state-dict** checkpoints (PyTorch ``torch.save`` files holding a
  name->tensor mapping, possibly nested under a ``state_dict`` key).
  Quantized heads are dequantized to float32: torch quantized tensors via
  their own scale/zero-point, plain int8/uint8 tensors via
  ``<name>_scale`` / ``<name>_zero_point`` sibling entries.
* **onnx** graphs (float32 heads), parsed without the onnx package.

The auto locator looks for the terminal affine layer. For state dicts the
candidates are 2-D ``*weight`` tensors with a matching ``*bias`` sibling;
candidates that feed another candidate (output dim equals the other's
input dim) are interior layers and are dropped. A single survivor is the
head; several survivors are an error (never guessed); if the dimension
chain is cyclic the lexicographically final candidate is used. For ONNX
the search walks back from the graph output through elementwise ops to
the last Gemm/MatMul with a 2-D initializer.

Weights are always emitted in K x D orientation (one row per class) as
IEEE-754 single precision; extraction is bit-exact for float32 sources. A
missing bias becomes a zero vector with a ``bias_synthesized`` meta flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from dfbs_extractor.dfbs import write_dfbs
from dfbs_extractor.errors import (
    AmbiguousLayer,
    MalformedCheckpoint,
    NoFinalLayerFound,
    UnsupportedDtype,
)
from dfbs_extractor.onnx_reader import DT_FLOAT, Graph, load_onnx_graph

ONNX_PASSTHROUGH_OPS = {
    "Softmax",
    "LogSoftmax",
    "Relu",
    "Identity",
    "Dropout",
    "Flatten",
    "Reshape",
    "Tanh",
    "Sigmoid",
}


@dataclass(frozen=True)
class ExtractionRule:
    """How to locate and convert the head.

    format: "auto", "state-dict" or "onnx". weight_name/bias_name give an
    explicit locator; both None means the auto heuristic. Emitted dtype is
    always float32 (quantized sources are dequantized).
    """

    format: str = "auto"
    weight_name: str | None = None
    bias_name: str | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.format not in ("auto", "state-dict", "onnx"):
            raise ValueError(f"unknown format {self.format!r}")


@dataclass(frozen=True)
class ExtractionSummary:
    """What was extracted; printed as the tool's JSON output."""

    k: int
    d: int
    weight_name: str
    bias_name: str | None
    source_format: str
    conversions: dict[str, str]
    meta: dict[str, str]

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "d": self.d,
            "weight_name": self.weight_name,
            "bias_name": self.bias_name,
            "source_format": self.source_format,
            "conversions": dict(self.conversions),
            "meta": dict(self.meta),
        }


def dequantize(q: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    """Affine dequantization to float32: (q - zero_point) * scale."""
    return (
        (q.astype(np.int32) - np.int32(zero_point)).astype(np.float32)
        * np.float32(scale)
    )


def _sniff_format(path: Path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:2] == b"PK" or head[:1] == b"\x80":  # torch zip / legacy pickle
        return "state-dict"
    return "onnx"


# --------------------------------------------------------------------------
# state-dict source


def _load_state_dict(path: Path) -> dict[str, Any]:
    import torch

    try:
        obj = torch.load(path, map_location="cpu", weights_only=True)
    except Exception:
        try:
            obj = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise MalformedCheckpoint(f"cannot load checkpoint: {exc}") from exc
    if isinstance(obj, dict) and isinstance(obj.get("state_dict"), dict):
        obj = obj["state_dict"]
    if not isinstance(obj, dict) or not obj:
        raise MalformedCheckpoint("checkpoint does not contain a state dict")
    return obj


def _tensor_ndim(value: Any) -> int | None:
    import torch

    if isinstance(value, torch.Tensor):
        return value.dim()
    if isinstance(value, np.ndarray):
        return value.ndim
    return None


def _bias_sibling(name: str, state: dict[str, Any]) -> str | None:
    if name.endswith("weight"):
        candidate = name[: -len("weight")] + "bias"
        if candidate in state and _tensor_ndim(state[candidate]) == 1:
            return candidate
    return None


def _out_in_dims(value: Any) -> tuple[int, int]:
    import torch

    if isinstance(value, torch.Tensor):
        return int(value.shape[0]), int(value.shape[1])
    return int(value.shape[0]), int(value.shape[1])


def _find_state_dict_head(state: dict[str, Any]) -> tuple[str, str | None]:
    candidates = [
        name
        for name, value in state.items()
        if name.endswith("weight") and _tensor_ndim(value) == 2
    ]
    if not candidates:
        raise NoFinalLayerFound("no 2-D weight tensors in checkpoint")
    with_bias = [c for c in candidates if _bias_sibling(c, state)]
    if with_bias:
        candidates = with_bias
    # drop interior layers: a candidate whose output dim feeds another
    # candidate's input dim is not terminal
    dims = {name: _out_in_dims(state[name]) for name in candidates}
    terminal = [
        name
        for name in candidates
        if not any(
            other != name and dims[name][0] == dims[other][1] for other in candidates
        )
    ]
    if len(terminal) == 1:
        chosen = terminal[0]
    elif len(terminal) > 1:
        raise AmbiguousLayer(sorted(terminal))
    else:
        # dimension chain is cyclic (e.g. equal-width MLP); fall back to the
        # lexicographically final candidate
        chosen = max(candidates)
    return chosen, _bias_sibling(chosen, state)


def _to_f32(name: str, value: Any, conversions: dict[str, str], state: dict[str, Any]) -> np.ndarray:
    import torch

    if isinstance(value, torch.Tensor):
        if value.is_quantized:
            if value.qscheme() in (torch.per_tensor_affine, torch.per_tensor_symmetric):
                scale = float(value.q_scale())
                zero = int(value.q_zero_point())
                out = dequantize(value.int_repr().numpy(), scale, zero)
                conversions[name] = f"per-tensor dequantized (scale={scale!r}, zero_point={zero})"
                return out
            raise UnsupportedDtype(
                f"{name}: unsupported quantization scheme {value.qscheme()}"
            )
        if value.dtype in (torch.int8, torch.uint8):
            return _dequantize_with_siblings(name, value.numpy(), conversions, state)
        if value.dtype == torch.float32:
            return value.detach().numpy()
        if value.dtype in (torch.float64, torch.float16, torch.bfloat16):
            conversions[name] = f"downcast {value.dtype} -> float32"
            return value.detach().to(torch.float32).numpy()
        raise UnsupportedDtype(f"{name}: cannot convert dtype {value.dtype}")
    if isinstance(value, np.ndarray):
        if value.dtype in (np.int8, np.uint8):
            return _dequantize_with_siblings(name, value, conversions, state)
        if value.dtype == np.float32:
            return value
        if np.issubdtype(value.dtype, np.floating):
            conversions[name] = f"downcast {value.dtype} -> float32"
            return value.astype(np.float32)
        raise UnsupportedDtype(f"{name}: cannot convert dtype {value.dtype}")
    raise UnsupportedDtype(f"{name}: not a tensor ({type(value).__name__})")


def _dequantize_with_siblings(
    name: str, q: np.ndarray, conversions: dict[str, str], state: dict[str, Any]
) -> np.ndarray:
    scale_key = f"{name}_scale"
    zero_key = f"{name}_zero_point"
    if scale_key not in state or zero_key not in state:
        raise UnsupportedDtype(
            f"{name}: int8 tensor without {scale_key}/{zero_key} siblings"
        )
    scale = float(np.asarray(state[scale_key]).item())
    zero = int(np.asarray(state[zero_key]).item())
    conversions[name] = f"affine dequantized (scale={scale!r}, zero_point={zero})"
    return dequantize(q, scale, zero)


def _extract_state_dict(
    path: Path, rule: ExtractionRule
) -> tuple[np.ndarray, np.ndarray, ExtractionSummary]:
    state = _load_state_dict(path)
    conversions: dict[str, str] = {}
    meta = dict(rule.meta)
    if rule.weight_name is not None:
        weight_name = rule.weight_name
        if weight_name not in state:
            raise NoFinalLayerFound(f"tensor {weight_name!r} not in checkpoint")
        bias_name = rule.bias_name
        if bias_name is None:
            bias_name = _bias_sibling(weight_name, state)
        elif bias_name not in state:
            raise NoFinalLayerFound(f"tensor {bias_name!r} not in checkpoint")
    else:
        weight_name, bias_name = _find_state_dict_head(state)

    weights = _to_f32(weight_name, state[weight_name], conversions, state)
    if weights.ndim != 2:
        raise NoFinalLayerFound(f"{weight_name!r} is not a 2-D tensor")
    if bias_name is not None:
        bias = _to_f32(bias_name, state[bias_name], conversions, state)
        if bias.ndim != 1 or bias.shape[0] != weights.shape[0]:
            raise MalformedCheckpoint(
                f"bias {bias_name!r} shape {bias.shape} does not match "
                f"weight rows {weights.shape[0]}"
            )
    else:
        bias = np.zeros(weights.shape[0], dtype=np.float32)
        meta["bias_synthesized"] = "true"
    summary = ExtractionSummary(
        k=weights.shape[0],
        d=weights.shape[1],
        weight_name=weight_name,
        bias_name=bias_name,
        source_format="state-dict",
        conversions=conversions,
        meta=meta,
    )
    return weights, bias, summary


# --------------------------------------------------------------------------
# onnx source


def _producer(graph: Graph, output_name: str):
    for node in graph.nodes:
        if output_name in node.outputs:
            return node
    return None


def _head_from_output(graph: Graph, output_name: str):
    """Walk back from a graph output to the affine head feeding it."""
    seen = 0
    name = output_name
    bias_from_add = None
    while seen < 32:
        node = _producer(graph, name)
        if node is None:
            return None
        if node.op_type in ("Gemm", "MatMul"):
            return node, bias_from_add
        if node.op_type == "Add" and bias_from_add is None:
            inits = [i for i in node.inputs if i in graph.initializers]
            vars_ = [i for i in node.inputs if i not in graph.initializers]
            if len(inits) == 1 and len(vars_) == 1:
                bias_from_add = inits[0]
                name = vars_[0]
                seen += 1
                continue
            return None
        if node.op_type in ONNX_PASSTHROUGH_OPS and node.inputs:
            name = node.inputs[0]
            seen += 1
            continue
        return None
    return None


def _onnx_head_tensors(
    graph: Graph, node, bias_from_add: str | None
) -> tuple[str, str | None, bool]:
    """Returns (weight_name, bias_name, transpose_needed)."""
    weight_candidates = [i for i in node.inputs if i in graph.initializers]
    weight_name = None
    for cand in weight_candidates:
        if len(graph.initializers[cand].dims) == 2:
            weight_name = cand
            break
    if weight_name is None:
        return None, None, False
    if node.op_type == "Gemm":
        trans_b = bool(node.attrs_i.get("transB", 0))
        bias_name = node.inputs[2] if len(node.inputs) > 2 else None
        # Gemm: Y = A @ B' (+C); transB=1 means B is stored (K, D) already
        return weight_name, bias_name, not trans_b
    # MatMul stores B as (D, K); the bias, if any, came from a trailing Add
    return weight_name, bias_from_add, True


def _extract_onnx(
    path: Path, rule: ExtractionRule
) -> tuple[np.ndarray, np.ndarray, ExtractionSummary]:
    graph = load_onnx_graph(path.read_bytes())
    conversions: dict[str, str] = {}
    meta = dict(rule.meta)
    transpose = False
    if rule.weight_name is not None:
        weight_name = rule.weight_name
        bias_name = rule.bias_name
        if weight_name not in graph.initializers:
            raise NoFinalLayerFound(f"initializer {weight_name!r} not in graph")
        for node in graph.nodes:
            if weight_name in node.inputs and node.op_type in ("Gemm", "MatMul"):
                _, found_bias, transpose = _onnx_head_tensors(graph, node, None)
                if bias_name is None:
                    bias_name = found_bias
                break
    else:
        heads = []
        for output in graph.outputs:
            found = _head_from_output(graph, output)
            if found is not None:
                heads.append(found)
        resolved = []
        for node, add_bias in heads:
            weight_name, bias_name, transpose = _onnx_head_tensors(graph, node, add_bias)
            if weight_name is not None:
                resolved.append((weight_name, bias_name, transpose))
        unique = {r[0]: r for r in resolved}
        if not unique:
            raise NoFinalLayerFound("no Gemm/MatMul head feeds a graph output")
        if len(unique) > 1:
            raise AmbiguousLayer(sorted(unique))
        weight_name, bias_name, transpose = next(iter(unique.values()))

    weight_tensor = graph.initializers[weight_name]
    if weight_tensor.data_type != DT_FLOAT:
        raise UnsupportedDtype(
            f"{weight_name!r} has dtype {weight_tensor.dtype_name}; "
            "quantized ONNX heads are not supported"
        )
    weights = weight_tensor.to_array()
    if weights.ndim != 2:
        raise NoFinalLayerFound(f"{weight_name!r} is not 2-D")
    if transpose:
        weights = np.ascontiguousarray(weights.T)
        conversions[weight_name] = "transposed (D, K) -> (K, D)"
    if bias_name is not None and bias_name in graph.initializers:
        bias_tensor = graph.initializers[bias_name]
        if bias_tensor.data_type != DT_FLOAT:
            raise UnsupportedDtype(
                f"{bias_name!r} has dtype {bias_tensor.dtype_name}"
            )
        bias = bias_tensor.to_array()
        if bias.ndim != 1 or bias.shape[0] != weights.shape[0]:
            raise MalformedCheckpoint(
                f"bias {bias_name!r} shape {bias.shape} does not match K={weights.shape[0]}"
            )
    else:
        bias = np.zeros(weights.shape[0], dtype=np.float32)
        bias_name = None
        meta["bias_synthesized"] = "true"
    summary = ExtractionSummary(
        k=weights.shape[0],
        d=weights.shape[1],
        weight_name=weight_name,
        bias_name=bias_name,
        source_format="onnx",
        conversions=conversions,
        meta=meta,
    )
    return weights, bias, summary


# --------------------------------------------------------------------------


def extract(checkpoint, rule: ExtractionRule, out) -> ExtractionSummary:
    """Extract the head from ``checkpoint`` and write a DFBS file to ``out``."""
    path = Path(checkpoint)
    fmt = rule.format
    if fmt == "auto":
        fmt = _sniff_format(path)
    if fmt == "state-dict":
        weights, bias, summary = _extract_state_dict(path, rule)
    else:
        weights, bias, summary = _extract_onnx(path, rule)
    write_dfbs(weights, bias, out)
    return summary
