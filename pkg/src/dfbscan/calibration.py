"""Profile calibration from a labeled configuration set.

A configuration set is a collection of clean final layers plus backdoored
ones with known target classes. Calibration computes the average clean
anomaly score (the similarity reference) and picks the similarity threshold
maximizing F1 of the backdoored-verdict over the set.

The threshold search sweeps the midpoints between consecutive unique
similarity values plus the endpoints 0 and 1. The verdict is a step
function of the threshold, so this sweep is exact: no grid or smooth
optimizer can do better.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dfbscan.detector import ClueProfile, cosine_similarity
from dfbscan.errors import (
    ClassCountMismatchError,
    DegenerateConfigError,
    EmptyCleanSetError,
)
from dfbscan.indicators import compute_indicator_matrix
from dfbscan.params import FinalLayerParams


@dataclass(frozen=True)
class ConfigSet:
    """Labeled clean/backdoor final layers sharing one class count."""

    cleans: tuple[FinalLayerParams, ...]
    backdoors: tuple[tuple[FinalLayerParams, int], ...]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "cleans", tuple(self.cleans))
        object.__setattr__(self, "backdoors", tuple(self.backdoors))
        object.__setattr__(self, "meta", dict(self.meta))
        if not self.cleans:
            raise EmptyCleanSetError("configuration set has no clean models")
        k = self.cleans[0].k
        for p in self.cleans:
            if p.k != k:
                raise ClassCountMismatchError(f"clean model has K={p.k}, expected {k}")
        for p, target in self.backdoors:
            if p.k != k:
                raise ClassCountMismatchError(
                    f"backdoor model has K={p.k}, expected {k}"
                )
            if not 0 <= target < k:
                raise ValueError(f"target class {target} out of range 0..{k - 1}")

    @property
    def k(self) -> int:
        return self.cleans[0].k

    def fingerprint(self) -> str:
        """Short content hash, recorded in profile metadata."""
        h = hashlib.sha256()
        for p in self.cleans:
            h.update(p.weights.tobytes())
            h.update(p.bias.tobytes())
        for p, target in self.backdoors:
            h.update(p.weights.tobytes())
            h.update(p.bias.tobytes())
            h.update(target.to_bytes(4, "little"))
        return h.hexdigest()[:16]


def normalized_stacks(config: ConfigSet) -> tuple[np.ndarray, np.ndarray]:
    """Normalized indicator matrices of all members, stacked per label.

    Returns (clean_stack, backdoor_stack) with shapes (n, K, 62); the
    backdoor stack may be empty. Computing these once makes repeated
    profile builds over different indicator subsets cheap.
    """
    clean = np.stack(
        [compute_indicator_matrix(p).normalized for p in config.cleans]
    )
    if config.backdoors:
        backdoor = np.stack(
            [compute_indicator_matrix(p).normalized for p, _ in config.backdoors]
        )
    else:
        backdoor = np.empty((0, config.k, clean.shape[2]))
    return clean, backdoor


def _stack_scores(stack: np.ndarray, indicator_ids: Sequence[int]) -> np.ndarray:
    unique = sorted(set(int(i) for i in indicator_ids))
    return stack[:, :, unique].mean(axis=2)


def f1_score(labels: np.ndarray, predictions: np.ndarray) -> float:
    """Standard F1 of the positive class; 0 when nothing is predicted positive."""
    labels = np.asarray(labels, dtype=bool)
    predictions = np.asarray(predictions, dtype=bool)
    tp = int(np.sum(labels & predictions))
    fp = int(np.sum(~labels & predictions))
    fn = int(np.sum(labels & ~predictions))
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def optimize_lambda_from_similarities(
    similarities: Sequence[float], labels: Sequence[int]
) -> tuple[float, float]:
    """Exact F1-maximizing threshold for the verdict ``similarity < lambda``.

    Candidates are 0, 1 and the midpoints between consecutive unique
    similarity values; among maximizers the largest lambda wins (most
    conservative toward flagging near-boundary models).
    """
    sims = np.asarray(similarities, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if not y.any() or y.all():
        raise DegenerateConfigError("need both clean and backdoor labels")
    uniq = np.unique(sims)
    candidates = np.concatenate(([0.0, 1.0], (uniq[:-1] + uniq[1:]) / 2.0))
    candidates = np.clip(candidates, 0.0, 1.0)
    best_lam, best_f1 = 0.0, -1.0
    for lam in candidates:
        f1 = f1_score(y, sims < lam)
        if f1 > best_f1 or (f1 == best_f1 and lam > best_lam):
            best_lam, best_f1 = float(lam), f1
    return best_lam, best_f1


def clean_reference(
    cleans: Sequence[FinalLayerParams], indicator_ids: Sequence[int]
) -> np.ndarray:
    """Element-wise mean anomaly score over a set of clean models."""
    if not cleans:
        raise EmptyCleanSetError("no clean models given")
    k = cleans[0].k
    for p in cleans:
        if p.k != k:
            raise ClassCountMismatchError(f"clean model has K={p.k}, expected {k}")
    stack = np.stack([compute_indicator_matrix(p).normalized for p in cleans])
    return _stack_scores(stack, indicator_ids).mean(axis=0)


def optimize_lambda(
    config: ConfigSet, indicator_ids: Sequence[int], reference: np.ndarray
) -> tuple[float, float]:
    """F1-maximizing lambda over the configuration set, given a reference."""
    if not config.backdoors:
        raise DegenerateConfigError("configuration set has no backdoor models")
    clean_stack, backdoor_stack = normalized_stacks(config)
    sims, labels = _similarities(clean_stack, backdoor_stack, indicator_ids, reference)
    return optimize_lambda_from_similarities(sims, labels)


def _similarities(
    clean_stack: np.ndarray,
    backdoor_stack: np.ndarray,
    indicator_ids: Sequence[int],
    reference: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    clean_scores = _stack_scores(clean_stack, indicator_ids)
    backdoor_scores = _stack_scores(backdoor_stack, indicator_ids)
    sims = np.array(
        [cosine_similarity(s, reference) for s in clean_scores]
        + [cosine_similarity(s, reference) for s in backdoor_scores]
    )
    labels = np.concatenate(
        (np.zeros(len(clean_scores), dtype=int), np.ones(len(backdoor_scores), dtype=int))
    )
    return sims, labels


def profile_from_stacks(
    clean_stack: np.ndarray,
    backdoor_stack: np.ndarray,
    indicator_ids: Sequence[int],
    k: int,
    meta: dict[str, str] | None = None,
) -> tuple[ClueProfile, float]:
    """Build a profile from precomputed normalized stacks; returns (profile, F1)."""
    if clean_stack.shape[0] == 0:
        raise EmptyCleanSetError("no clean models given")
    if backdoor_stack.shape[0] == 0:
        raise DegenerateConfigError("no backdoor models given")
    reference = _stack_scores(clean_stack, indicator_ids).mean(axis=0)
    sims, labels = _similarities(clean_stack, backdoor_stack, indicator_ids, reference)
    lam, f1 = optimize_lambda_from_similarities(sims, labels)
    profile = ClueProfile(
        indicator_ids=tuple(sorted(set(int(i) for i in indicator_ids))),
        lam=lam,
        clean_reference=reference,
        k=k,
        meta=meta or {},
    )
    return profile, f1


def build_profile(config: ConfigSet, indicator_ids: Sequence[int]) -> ClueProfile:
    """Calibrate a full profile (reference + lambda) on a configuration set."""
    clean_stack, backdoor_stack = normalized_stacks(config)
    meta = dict(config.meta)
    meta.update(
        {
            "config_fingerprint": config.fingerprint(),
            "config_cleans": str(len(config.cleans)),
            "config_backdoors": str(len(config.backdoors)),
        }
    )
    profile, f1 = profile_from_stacks(
        clean_stack, backdoor_stack, indicator_ids, config.k, meta
    )
    profile.meta["config_f1"] = repr(f1)
    return profile
