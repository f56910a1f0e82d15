"""Per-class anomaly indicators of final-layer parameters.

Thirteen "major" statistics are computed per class from the weight matrix W
(K x D) and bias vector b:

    WM   mean of the weight row, (1/D) sum_j W[i,j]
    AWM  absolute weight mean, |WM[i]|
    VW   population variance of the weight row
    SVW  population standard deviation of the weight row
    L1   mean absolute weight, (1/D) sum_j |W[i,j]|
    L2   Euclidean norm of the weight row
    WE   softmax over classes of the row mean square (1/D) sum_j W[i,j]^2
    B    bias value
    SWB  bias plus full row sum, b[i] + sum_j W[i,j]
    AWB  minmax(WM)[i] + minmax(B)[i]
    WS   mean cosine distance to all rows, (1/K) sum_j (1 - cos(w_i, w_j))
    WC   1 - minmax(EU)[i] with EU[i] = K / (K + sum_j W[i,j])
    WBZ  minmax(zscore(WM))[i] + minmax(zscore(B))[i]

The first twelve are each expanded through five forms -- the raw value, its
z-score across classes, the normalized absolute deviation from the class
mean, and the distances past the upper and lower Tukey fences -- while WBZ
contributes only its raw and NAD forms, giving 12*5 + 2 = 62 indicator
columns. Column n of the clue matrix is the indicator with canonical index
n (majors in the order above, forms in the order RAW, ZS, NAD, IQU, IQL).

Degenerate cases follow a "no class is anomalous when all are equal" rule:
z-scores and NAD of a constant vector are zero, min-max of a constant
vector is zero, and a constant raw column normalizes to the neutral 0.5.

All operations are pure functions of immutable inputs and are safe to call
from parallel workers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from dfbscan.params import FinalLayerParams

N_INDICATORS = 62

#: Convenience selection of every indicator, in canonical order.
ALL_INDICATORS: tuple[int, ...] = tuple(range(N_INDICATORS))


class Major(enum.IntEnum):
    """Major indicator kinds, in canonical order."""

    WM = 0
    AWM = 1
    VW = 2
    SVW = 3
    L1 = 4
    L2 = 5
    WE = 6
    B = 7
    SWB = 8
    AWB = 9
    WS = 10
    WC = 11
    WBZ = 12


class Form(enum.IntEnum):
    """Extension forms applied to a major indicator, in canonical order."""

    RAW = 0
    ZS = 1
    NAD = 2
    IQU = 3
    IQL = 4


#: Forms WBZ supports (it is already a z-score summary).
_WBZ_FORMS = (Form.RAW, Form.NAD)

_MAJOR_LABELS = {
    Major.WM: "weight_mean",
    Major.AWM: "abs_weight_mean",
    Major.VW: "weight_variance",
    Major.SVW: "weight_std",
    Major.L1: "weight_l1",
    Major.L2: "weight_l2",
    Major.WE: "weight_energy",
    Major.B: "bias",
    Major.SWB: "weight_bias_sum",
    Major.AWB: "avg_weight_bias",
    Major.WS: "weight_similarity",
    Major.WC: "weight_certainty",
    Major.WBZ: "weight_bias_zscore",
}

_FORM_LABELS = {
    Form.RAW: "raw",
    Form.ZS: "zscore",
    Form.NAD: "nad",
    Form.IQU: "iqr_upper",
    Form.IQL: "iqr_lower",
}


@dataclass(frozen=True)
class IndicatorId:
    """A (major, form) pair identifying one of the 62 indicators."""

    major: Major
    form: Form

    def __post_init__(self) -> None:
        if self.major == Major.WBZ and self.form not in _WBZ_FORMS:
            raise ValueError(f"WBZ supports forms {_WBZ_FORMS}, not {self.form}")

    @property
    def name(self) -> str:
        return f"{_MAJOR_LABELS[self.major]}_{_FORM_LABELS[self.form]}"


def indicator_index(ind: IndicatorId) -> int:
    """Canonical index (0..61) of an indicator."""
    if ind.major == Major.WBZ:
        return 60 + _WBZ_FORMS.index(ind.form)
    return int(ind.major) * 5 + int(ind.form)


def indicator_id(index: int) -> IndicatorId:
    """Inverse of indicator_index."""
    if not 0 <= index < N_INDICATORS:
        raise ValueError(f"indicator index {index} out of range 0..61")
    if index >= 60:
        return IndicatorId(Major.WBZ, _WBZ_FORMS[index - 60])
    return IndicatorId(Major(index // 5), Form(index % 5))


def indicator_catalog() -> list[tuple[int, IndicatorId, str]]:
    """All 62 indicators as (canonical index, id, name), in canonical order.

    Stable across releases within a major version.
    """
    return [(n, indicator_id(n), indicator_id(n).name) for n in range(N_INDICATORS)]


@dataclass(frozen=True)
class IndicatorMatrix:
    """Raw and [0,1]-normalized indicator values, one column per indicator."""

    raw: np.ndarray  # K x 62
    normalized: np.ndarray  # K x 62, entries in [0, 1]
    k: int

    def __post_init__(self) -> None:
        self.raw.setflags(write=False)
        self.normalized.setflags(write=False)


def _minmax(x: np.ndarray) -> np.ndarray:
    """(x - min) / (max - min); all zeros for a constant vector."""
    lo = x.min()
    span = x.max() - lo
    if span == 0:
        return np.zeros_like(x)
    return (x - lo) / span


def _zscore(x: np.ndarray) -> np.ndarray:
    """Population z-score; all zeros for a constant vector."""
    sd = x.std()
    if sd == 0:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _weight_similarity(w: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # Mean cosine distance to every row, self included (a zero-norm row has
    # cosine 0 against everything, itself included).
    gram = w @ w.T
    denom = np.outer(norms, norms)
    cos = np.divide(gram, denom, out=np.zeros_like(gram), where=denom > 0)
    np.clip(cos, -1.0, 1.0, out=cos)
    return 1.0 - cos.mean(axis=1)


def _epistemic_uncertainty(row_sum: np.ndarray, k: int) -> np.ndarray:
    # K/(K + sum) can divide by near-zero for negative weight sums; clamp the
    # denominator magnitude, preserving sign. Min-max afterward absorbs it.
    denom = k + row_sum
    denom = np.where(np.abs(denom) < 1e-6, np.copysign(1e-6, denom), denom)
    return k / denom


def _majors_matrix(w: np.ndarray, b: np.ndarray) -> np.ndarray:
    k, d = w.shape
    row_sum = w.sum(axis=1)
    wm = row_sum / d
    vw = w.var(axis=1)
    sq_mean = np.square(w).mean(axis=1)
    l2 = np.sqrt(sq_mean * d)
    cols = [
        wm,
        np.abs(wm),
        vw,
        np.sqrt(vw),
        np.abs(w).mean(axis=1),
        l2,
        _softmax(sq_mean),
        b,
        b + row_sum,
        _minmax(wm) + _minmax(b),
        _weight_similarity(w, l2),
        1.0 - _minmax(_epistemic_uncertainty(row_sum, k)),
        _minmax(_zscore(wm)) + _minmax(_zscore(b)),
    ]
    return np.column_stack(cols)


def major_indicator(params: FinalLayerParams, major: Major) -> np.ndarray:
    """K-vector of one major statistic, as float64."""
    w = params.weights.astype(np.float64)
    b = params.bias.astype(np.float64)
    return _majors_matrix(w, b)[:, int(major)]


def extend_indicator(values: np.ndarray, form: Form) -> np.ndarray:
    """Apply one extension form to a K-vector of indicator values."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 2:
        raise ValueError(f"need a K-vector with K >= 2, got shape {v.shape}")
    if form == Form.RAW:
        return v.copy()
    if form == Form.ZS:
        return _zscore(v)
    if form == Form.NAD:
        span = v.max() - v.min()
        if span == 0:
            return np.zeros_like(v)
        return np.abs(v - v.mean()) / span
    q1, q3 = np.quantile(v, [0.25, 0.75])
    iqr = q3 - q1
    if form == Form.IQU:
        return v - (q3 + 1.5 * iqr)
    if form == Form.IQL:
        return (q1 - 1.5 * iqr) - v
    raise ValueError(f"unknown form {form!r}")


def compute_indicator_matrix(params: FinalLayerParams) -> IndicatorMatrix:
    """All 62 indicator columns for one final layer, raw and normalized."""
    w = params.weights.astype(np.float64)
    b = params.bias.astype(np.float64)
    majors = _majors_matrix(w, b)
    base = majors[:, :12]

    mean = base.mean(axis=0)
    std = base.std(axis=0)
    span = base.max(axis=0) - base.min(axis=0)
    q1, q3 = np.quantile(base, [0.25, 0.75], axis=0)
    iqr = q3 - q1

    dev = base - mean
    zs = np.divide(dev, std, out=np.zeros_like(base), where=std > 0)
    nad = np.divide(np.abs(dev), span, out=np.zeros_like(base), where=span > 0)
    iqu = base - (q3 + 1.5 * iqr)
    iql = (q1 - 1.5 * iqr) - base

    k = params.k
    raw = np.empty((k, N_INDICATORS), dtype=np.float64)
    raw[:, 0:60:5] = base
    raw[:, 1:60:5] = zs
    raw[:, 2:60:5] = nad
    raw[:, 3:60:5] = iqu
    raw[:, 4:60:5] = iql
    wbz = majors[:, 12]
    raw[:, 60] = wbz
    raw[:, 61] = extend_indicator(wbz, Form.NAD)

    lo = raw.min(axis=0)
    col_span = raw.max(axis=0) - lo
    normalized = np.divide(
        raw - lo,
        col_span,
        out=np.full_like(raw, 0.5),  # constant columns are neutral
        where=col_span > 0,
    )
    return IndicatorMatrix(raw=raw, normalized=normalized, k=k)
