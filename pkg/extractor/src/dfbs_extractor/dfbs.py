"""Writer for the portable DFBS final-layer format.

Layout: magic ``DFBS``, version byte 0x01, u32-LE K, u32-LE D, K*D
float32-LE row-major weights, K float32-LE biases. This is the scanner's
interchange contract; the writer is self-contained so the extractor ships
without the scanner installed.
"""

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DFBS"
VERSION = 1
_HEADER = struct.Struct("<4sBII")


def write_dfbs(weights: np.ndarray, bias: np.ndarray, path) -> None:
    """Atomically write a K x D float32 head to ``path``."""
    w = np.ascontiguousarray(weights, dtype="<f4")
    b = np.ascontiguousarray(bias, dtype="<f4")
    if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ValueError(f"bad head shapes: weights {w.shape}, bias {b.shape}")
    k, d = w.shape
    payload = _HEADER.pack(MAGIC, VERSION, k, d) + w.tobytes() + b.tobytes()
    path = Path(path)
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
