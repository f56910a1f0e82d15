"""Portable final-layer container and its on-disk formats.

A classifier head is the K x D weight matrix (one row per class) plus the
K-entry bias vector, stored as IEEE-754 single precision. Two formats:

* binary: magic ``DFBS``, version byte 0x01, u32-LE K, u32-LE D,
  K*D float32-LE row-major weights, K float32-LE biases. No padding, no
  checksum, no metadata. Total size is 13 + 4*(K*D + K) bytes.
* json: object with ``k``, ``d``, ``weights`` (K arrays of D numbers),
  ``bias`` (K numbers) and an optional ``meta`` string map.

Binary round-trips are bit-exact. Loading validates dimensions and
finiteness, so downstream code never sees NaN/Inf entries.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dfbscan.errors import DimensionError, MalformedFileError, NonFiniteError

MAGIC = b"DFBS"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sBII")  # magic, version, K, D


@dataclass(frozen=True, eq=False)
class FinalLayerParams:
    """Validated, immutable final-layer parameters.

    ``meta`` carries free-form provenance strings (architecture, dataset,
    source path); it is advisory, excluded from equality, and not stored in
    the binary format.
    """

    weights: np.ndarray
    bias: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float32, copy=True)
        b = np.array(self.bias, dtype=np.float32, copy=True)
        if w.ndim != 2:
            raise DimensionError(f"weights must be 2-D, got shape {w.shape}")
        if w.shape[0] < 2:
            raise DimensionError(f"need at least 2 classes, got K={w.shape[0]}")
        if w.shape[1] < 1:
            raise DimensionError("latent dimension must be at least 1")
        if b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise DimensionError(
                f"bias length {b.shape[0] if b.ndim == 1 else b.shape} does not "
                f"match K={w.shape[0]} weight rows"
            )
        _check_finite(w, b)
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other: object) -> bool:
        # Bit-exact on parameters; meta is advisory.
        if not isinstance(other, FinalLayerParams):
            return NotImplemented
        return (
            self.weights.shape == other.weights.shape
            and self.weights.tobytes() == other.weights.tobytes()
            and self.bias.tobytes() == other.bias.tobytes()
        )

    def __repr__(self) -> str:
        return f"FinalLayerParams(k={self.k}, d={self.d})"


def _check_finite(w: np.ndarray, b: np.ndarray) -> None:
    if not np.isfinite(w).all():
        i, j = np.argwhere(~np.isfinite(w))[0]
        raise NonFiniteError(
            f"non-finite weight at row {i}, col {j}", row=int(i), col=int(j)
        )
    if not np.isfinite(b).all():
        i = int(np.argwhere(~np.isfinite(b))[0][0])
        raise NonFiniteError(f"non-finite bias at index {i}", row=i)


def binary_size(k: int, d: int) -> int:
    """On-disk size in bytes of the binary format for a K x D head."""
    return _HEADER.size + 4 * (k * d + k)


def load_final_layer(path: str | os.PathLike, format: str = "auto") -> FinalLayerParams:
    """Load a final layer from ``path``.

    ``format`` is ``binary``, ``json`` or ``auto``; auto sniffs the magic
    bytes. Raises MalformedFileError, DimensionError or NonFiniteError on
    invalid content, OSError on unreadable paths.
    """
    data = Path(path).read_bytes()
    if format == "auto":
        format = "binary" if data[:4] == MAGIC else "json"
    if format == "binary":
        return _from_binary(data)
    if format == "json":
        return _from_json(data)
    raise ValueError(f"unknown format {format!r}")


def save_final_layer(
    params: FinalLayerParams, path: str | os.PathLike, format: str = "binary"
) -> None:
    """Write ``params`` to ``path`` atomically (temp file + rename)."""
    if format == "binary":
        payload = _to_binary(params)
    elif format == "json":
        payload = _to_json(params)
    else:
        raise ValueError(f"unknown format {format!r}")
    _atomic_write(Path(path), payload)


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _to_binary(params: FinalLayerParams) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, params.k, params.d)
    w = np.ascontiguousarray(params.weights, dtype="<f4")
    b = np.ascontiguousarray(params.bias, dtype="<f4")
    return header + w.tobytes() + b.tobytes()


def _from_binary(data: bytes) -> FinalLayerParams:
    if len(data) < _HEADER.size:
        raise MalformedFileError(f"file too short for header ({len(data)} bytes)")
    magic, version, k, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MalformedFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise MalformedFileError(f"unsupported format version {version}")
    expected = binary_size(k, d)
    if len(data) != expected:
        raise MalformedFileError(
            f"payload length {len(data)} disagrees with declared K={k}, D={d} "
            f"(expected {expected} bytes)"
        )
    weights = np.frombuffer(data, dtype="<f4", count=k * d, offset=_HEADER.size)
    bias = np.frombuffer(data, dtype="<f4", count=k, offset=_HEADER.size + 4 * k * d)
    return FinalLayerParams(weights=weights.reshape(k, d), bias=bias)


def _to_json(params: FinalLayerParams) -> bytes:
    doc = {
        "k": params.k,
        "d": params.d,
        "weights": [[float(x) for x in row] for row in params.weights],
        "bias": [float(x) for x in params.bias],
    }
    if params.meta:
        doc["meta"] = dict(params.meta)
    return (json.dumps(doc, indent=1) + "\n").encode()


def _from_json(data: bytes) -> FinalLayerParams:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedFileError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedFileError("JSON root must be an object")
    missing = {"k", "d", "weights", "bias"} - doc.keys()
    if missing:
        raise MalformedFileError(f"missing JSON fields: {sorted(missing)}")
    try:
        weights = np.array(doc["weights"], dtype=np.float32)
        bias = np.array(doc["bias"], dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise MalformedFileError(f"non-numeric weights or bias: {exc}") from exc
    if weights.ndim != 2:
        raise DimensionError("weights must be a K x D array of arrays")
    if weights.shape != (doc["k"], doc["d"]):
        raise DimensionError(
            f"declared k={doc['k']}, d={doc['d']} disagrees with weight shape "
            f"{weights.shape}"
        )
    meta = doc.get("meta", {})
    if not isinstance(meta, dict):
        raise MalformedFileError("meta must be an object of strings")
    return FinalLayerParams(
        weights=weights, bias=bias, meta={str(k): str(v) for k, v in meta.items()}
    )
