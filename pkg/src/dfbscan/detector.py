"""Two-stage backdoor detection from indicator matrices.

A calibrated ClueProfile carries the selected indicator columns, a cosine
similarity threshold and the average clean score vector. Scanning a model
computes its per-class anomaly score (the mean of the selected normalized
indicator columns), compares the score vector to the clean reference by
cosine similarity, and flags the model when the similarity falls below the
threshold; the class with the largest score is then reported as the
backdoor target.

detect() is pure apart from its wall-clock timing field; batches may be
scanned by a parallel map with no shared state.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dfbscan.errors import (
    BatchTooSmallError,
    ClassCountMismatchError,
    EmptySelectionError,
    LengthMismatchError,
    UnknownIndicatorError,
)
from dfbscan.indicators import (
    N_INDICATORS,
    IndicatorMatrix,
    compute_indicator_matrix,
)
from dfbscan.params import FinalLayerParams

PROFILE_FORMAT_VERSION = 1


def _canonical_ids(indicator_ids: Sequence[int]) -> tuple[int, ...]:
    ids = [int(i) for i in indicator_ids]
    if not ids:
        raise EmptySelectionError("indicator selection is empty")
    for i in ids:
        if not 0 <= i < N_INDICATORS:
            raise UnknownIndicatorError(f"indicator id {i} out of range 0..61")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate indicator ids")
    return tuple(sorted(ids))


@dataclass(frozen=True)
class ClueProfile:
    """Calibrated detector configuration.

    indicator_ids are canonical catalog indices, stored strictly ascending;
    lam is the similarity threshold in [0, 1]; clean_reference is the
    average anomaly score vector of the calibration cleans.
    """

    indicator_ids: tuple[int, ...]
    lam: float
    clean_reference: np.ndarray
    k: int
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "indicator_ids", _canonical_ids(self.indicator_ids))
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        ref = np.array(self.clean_reference, dtype=np.float64, copy=True)
        if ref.ndim != 1 or ref.shape[0] != self.k:
            raise ClassCountMismatchError(
                f"clean reference length {ref.shape} does not match k={self.k}"
            )
        if not np.isfinite(ref).all() or ref.min() < 0.0 or ref.max() > 1.0:
            raise ValueError("clean reference entries must lie in [0, 1]")
        ref.setflags(write=False)
        object.__setattr__(self, "clean_reference", ref)
        object.__setattr__(self, "meta", dict(self.meta))


@dataclass(frozen=True)
class DetectionReport:
    """Result of scanning one model. target_class is set iff flagged."""

    score: np.ndarray
    similarity: float
    is_backdoored: bool
    target_class: int | None
    elapsed: float  # seconds spent in detection, excluding file I/O
    profile_meta: dict[str, str] = field(default_factory=dict)


def anomaly_score(matrix: IndicatorMatrix, indicator_ids: Sequence[int]) -> np.ndarray:
    """Per-class mean of the selected normalized columns (set semantics)."""
    ids = [int(i) for i in indicator_ids]
    if not ids:
        raise EmptySelectionError("indicator selection is empty")
    for i in ids:
        if not 0 <= i < N_INDICATORS:
            raise UnknownIndicatorError(f"indicator id {i} out of range 0..61")
    unique = sorted(set(ids))
    return matrix.normalized[:, unique].mean(axis=1)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Standard cosine similarity; 0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def detect(params: FinalLayerParams, profile: ClueProfile) -> DetectionReport:
    """Scan one final layer against a calibrated profile."""
    if params.k != profile.k:
        raise ClassCountMismatchError(
            f"model has K={params.k} classes, profile expects {profile.k}"
        )
    t0 = time.perf_counter()
    matrix = compute_indicator_matrix(params)
    score = anomaly_score(matrix, profile.indicator_ids)
    similarity = cosine_similarity(score, profile.clean_reference)
    elapsed = time.perf_counter() - t0

    is_backdoored = similarity < profile.lam
    target = int(np.argmax(score)) if is_backdoored else None  # ties: lowest index
    meta = dict(profile.meta)
    if not score.any():
        # All-zero scores only arise from fully constant indicator columns,
        # itself anomalous; similarity is 0 by convention.
        meta["degenerate_score"] = "true"
    return DetectionReport(
        score=score,
        similarity=similarity,
        is_backdoored=is_backdoored,
        target_class=target,
        elapsed=elapsed,
        profile_meta=meta,
    )


@dataclass(frozen=True)
class ReferenceFreeResult:
    """Per-model outcome of a reference-free batch scan."""

    index: int
    mean_similarity: float
    z_score: float
    flagged: bool


def detect_reference_free(
    batch: Sequence[FinalLayerParams],
    indicator_ids: Sequence[int],
    z_threshold: float = 2.0,
) -> list[ReferenceFreeResult]:
    """Flag outliers in a batch without any calibrated profile.

    Computes each model's anomaly score, the full pairwise cosine similarity
    matrix, each model's mean similarity to all others, and the z-scores of
    those means; model m is flagged iff z_m < -z_threshold. Requires at
    least 3 models sharing a class count.
    """
    if len(batch) < 3:
        raise BatchTooSmallError(f"need at least 3 models, got {len(batch)}")
    k = batch[0].k
    for m, p in enumerate(batch):
        if p.k != k:
            raise ClassCountMismatchError(
                f"model {m} has K={p.k}, batch leader has K={k}"
            )
    scores = np.stack(
        [anomaly_score(compute_indicator_matrix(p), indicator_ids) for p in batch]
    )
    norms = np.linalg.norm(scores, axis=1)
    denom = np.outer(norms, norms)
    sims = np.divide(
        scores @ scores.T, denom, out=np.zeros_like(denom), where=denom > 0
    )
    n = len(batch)
    means = (sims.sum(axis=1) - np.diag(sims)) / (n - 1)
    sd = means.std()
    # identical models differ only by float rounding; treat that as zero spread
    z = (means - means.mean()) / sd if sd > 1e-12 else np.zeros_like(means)
    return [
        ReferenceFreeResult(
            index=m,
            mean_similarity=float(means[m]),
            z_score=float(z[m]),
            flagged=bool(z[m] < -z_threshold),
        )
        for m in range(n)
    ]


def profile_to_dict(profile: ClueProfile) -> dict:
    """JSON-ready representation of a profile."""
    return {
        "version": PROFILE_FORMAT_VERSION,
        "k": profile.k,
        "indicator_ids": list(profile.indicator_ids),
        "lambda": profile.lam,
        "clean_reference": [float(x) for x in profile.clean_reference],
        "meta": dict(profile.meta),
    }


def profile_from_dict(doc: dict) -> ClueProfile:
    if doc.get("version") != PROFILE_FORMAT_VERSION:
        raise ValueError(f"unsupported profile version {doc.get('version')!r}")
    return ClueProfile(
        indicator_ids=tuple(doc["indicator_ids"]),
        lam=float(doc["lambda"]),
        clean_reference=np.asarray(doc["clean_reference"], dtype=np.float64),
        k=int(doc["k"]),
        meta={str(k): str(v) for k, v in doc.get("meta", {}).items()},
    )


def save_profile(profile: ClueProfile, path: str | os.PathLike) -> None:
    from dfbscan.params import _atomic_write

    payload = (json.dumps(profile_to_dict(profile), indent=1) + "\n").encode()
    _atomic_write(Path(path), payload)


def load_profile(path: str | os.PathLike) -> ClueProfile:
    return profile_from_dict(json.loads(Path(path).read_text()))
