"""Indicator subset selection over a configuration set.

Five rankers/selectors are available: target-identification accuracy,
mutual information against the clean/backdoor label, L1-regularized
logistic regression (support along a penalty path), recursive feature
elimination under an L2-regularized logistic model, and a per-feature
isolation-forest separability gap. sweep_subset then walks prefixes of a
ranking and returns the smallest subset attaining the maximal calibrated
F1.

Each config-set model is summarized per indicator by the anomaly
prominence of its most suspicious class: max over classes of the
normalized column minus the column mean. The prominence of a constant
(neutral) column is 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.ensemble import IsolationForest

from dfbscan.calibration import (
    ConfigSet,
    normalized_stacks,
    profile_from_stacks,
)
from dfbscan.errors import (
    DegenerateLabelsError,
    NoBackdoorModelsError,
    TooFewCleansError,
)
from dfbscan.indicators import N_INDICATORS

logger = logging.getLogger(__name__)

METHODS = ("acc", "mi", "l1lr", "rfe", "iforest", "all", "topk")

MAX_ITER = 5000
STEP_TOL = 1e-6


@dataclass(frozen=True)
class FeatureTable:
    """Per-model scalar features (rows) for all 62 indicators (columns)."""

    features: np.ndarray  # M x 62
    labels: np.ndarray  # M, 0 = clean, 1 = backdoor
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if f.ndim != 2 or f.shape[0] != y.shape[0]:
            raise ValueError(f"features {f.shape} do not match labels {y.shape}")
        if not np.isfinite(f).all():
            raise ValueError("feature values must be finite")
        f.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of a subset search: ranking, chosen ids and achieved F1."""

    ranking: tuple[int, ...]  # permutation of 0..61, most informative first
    chosen: tuple[int, ...]  # canonical (ascending) selected subset
    n: int
    f1: float
    method: str
    curve: tuple[float, ...] = ()  # F1 at each prefix size when swept

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.chosen:
            raise ValueError("chosen subset is empty")


def _prominence(stack: np.ndarray) -> np.ndarray:
    # stack: (models, K, 62) -> (models, 62)
    return stack.max(axis=1) - stack.mean(axis=1)


def featurize(config: ConfigSet) -> FeatureTable:
    """Per-model anomaly prominence features, cleans first then backdoors."""
    clean_stack, backdoor_stack = normalized_stacks(config)
    features = np.concatenate(
        (_prominence(clean_stack), _prominence(backdoor_stack)), axis=0
    )
    labels = np.concatenate(
        (np.zeros(len(clean_stack), dtype=int), np.ones(len(backdoor_stack), dtype=int))
    )
    return FeatureTable(
        features=features,
        labels=labels,
        meta={"feature": "max_minus_mean_prominence"},
    )


def _rank_descending(scores: np.ndarray) -> tuple[int, ...]:
    # Descending by score, ties broken by lower canonical index.
    order = np.lexsort((np.arange(len(scores)), -scores))
    return tuple(int(i) for i in order)


def rank_by_accuracy(config: ConfigSet) -> tuple[int, ...]:
    """Rank indicators by how often their per-column argmax hits the target."""
    if not config.backdoors:
        raise NoBackdoorModelsError("accuracy ranking needs backdoor models")
    _, backdoor_stack = normalized_stacks(config)
    targets = np.array([t for _, t in config.backdoors])
    # argmax over classes per (model, column); ties resolve to lowest index.
    hits = backdoor_stack.argmax(axis=1) == targets[:, None]
    return _rank_descending(hits.mean(axis=0))


def _equal_frequency_mi(x: np.ndarray, y: np.ndarray, bins: int = 10) -> float:
    # Discretize x into equal-frequency bins (duplicate edges collapse) and
    # measure mutual information against the binary label, in bits.
    edges = np.unique(np.quantile(x, np.linspace(0.0, 1.0, bins + 1)[1:-1]))
    bx = np.searchsorted(edges, x, side="right")
    n = len(x)
    mi = 0.0
    for b in np.unique(bx):
        for label in (0, 1):
            joint = np.sum((bx == b) & (y == label)) / n
            if joint == 0:
                continue
            px = np.sum(bx == b) / n
            py = np.sum(y == label) / n
            mi += joint * np.log(joint / (px * py))
    return mi / np.log(2.0)


def rank_by_mutual_info(table: FeatureTable) -> tuple[int, ...]:
    """Rank features by binned mutual information with the label."""
    y = table.labels
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("feature table carries a single label class")
    mi = np.array(
        [_equal_frequency_mi(table.features[:, j], y) for j in range(table.features.shape[1])]
    )
    return _rank_descending(mi)


def _standardize(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    out = np.zeros_like(x)
    np.divide(x - mean, std, out=out, where=std > 0)  # constant features stay 0
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _lipschitz(x: np.ndarray) -> float:
    n = x.shape[0]
    aug = np.hstack([x, np.ones((n, 1))])
    smax = np.linalg.svd(aug, compute_uv=False)[0]
    return max(smax**2 / (4.0 * n), 1e-12)


def _fit_logistic_l1(
    x: np.ndarray,
    y: np.ndarray,
    alpha: float,
    w0: np.ndarray | None = None,
    b0: float = 0.0,
) -> tuple[np.ndarray, float, bool]:
    """Proximal gradient descent for L1-penalized logistic regression.

    Minimizes mean log-loss + alpha * ||w||_1 (bias unpenalized). Returns
    (weights, bias, converged); non-convergence within MAX_ITER steps is
    reported, never raised.
    """
    n, p = x.shape
    w = np.zeros(p) if w0 is None else w0.copy()
    b = b0
    step = 1.0 / _lipschitz(x)
    thresh = alpha * step
    for _ in range(MAX_ITER):
        r = _sigmoid(x @ w + b) - y
        gw = x.T @ r / n
        gb = r.mean()
        w_new = w - step * gw
        w_new = np.sign(w_new) * np.maximum(np.abs(w_new) - thresh, 0.0)
        b_new = b - step * gb
        delta = max(np.abs(w_new - w).max(), abs(b_new - b))
        w, b = w_new, b_new
        if delta <= STEP_TOL:
            return w, b, True
    return w, b, False


def _fit_logistic_l2(
    x: np.ndarray, y: np.ndarray, alpha: float = 1e-2
) -> tuple[np.ndarray, float, bool]:
    """Gradient descent for L2-regularized logistic regression (bias unpenalized)."""
    n, p = x.shape
    w = np.zeros(p)
    b = 0.0
    step = 1.0 / (_lipschitz(x) + 2.0 * alpha)
    for _ in range(MAX_ITER):
        r = _sigmoid(x @ w + b) - y
        gw = x.T @ r / n + 2.0 * alpha * w
        gb = r.mean()
        w_new = w - step * gw
        b_new = b - step * gb
        delta = max(np.abs(w_new - w).max(), abs(b_new - b))
        w, b = w_new, b_new
        if delta <= STEP_TOL:
            return w, b, True
    return w, b, False


@dataclass(frozen=True)
class L1PathPoint:
    """One point of the L1 penalty path."""

    penalty: float
    support: tuple[int, ...]
    f1: float | None  # calibrated F1 of the support; None when skipped
    converged: bool


def select_l1_logistic(
    table: FeatureTable, config: ConfigSet | None = None
) -> list[L1PathPoint]:
    """L1 penalty path over 20 log-spaced penalties in [1e-3, 1e1].

    Features are standardized internally; supports are the nonzero
    coefficient sets, warm-started along the path. When ``config`` is given
    each nonzero support is scored by calibrated detection F1 on it; empty
    supports are reported with the F1 entry skipped.
    """
    y = table.labels
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("feature table carries a single label class")
    x = _standardize(table.features)
    stacks = normalized_stacks(config) if config is not None else None

    path: list[L1PathPoint] = []
    w = np.zeros(x.shape[1])
    b = 0.0
    for penalty in np.logspace(-3.0, 1.0, 20):
        w, b, converged = _fit_logistic_l1(x, y.astype(float), penalty, w0=w, b0=b)
        if not converged:
            logger.warning("L1 path point alpha=%.4g did not converge", penalty)
        support = tuple(int(i) for i in np.flatnonzero(w != 0.0))
        f1 = None
        if support and stacks is not None:
            _, f1 = profile_from_stacks(stacks[0], stacks[1], support, config.k)
        path.append(
            L1PathPoint(penalty=float(penalty), support=support, f1=f1, converged=converged)
        )
    return path


def _elimination_order(table: FeatureTable) -> list[list[int]]:
    # Batches of removed features, 10% (at least 1) of the active set per
    # round, smallest |coefficient| first, until one feature remains.
    x_full = _standardize(table.features)
    y = table.labels.astype(float)
    active = list(range(x_full.shape[1]))
    removed: list[list[int]] = []
    while len(active) > 1:
        w, _, converged = _fit_logistic_l2(x_full[:, active], y)
        if not converged:
            logger.warning("RFE round with %d features did not converge", len(active))
        drop = max(1, int(0.1 * len(active)))
        drop = min(drop, len(active) - 1)
        order = np.lexsort((np.arange(len(active)), np.abs(w)))
        batch = sorted(active[i] for i in order[:drop])
        removed.append(batch)
        active = [a for a in active if a not in batch]
    removed.append(active)  # the survivor, as the final "batch"
    return removed


def select_rfe(table: FeatureTable, n_target: int) -> tuple[int, ...]:
    """Recursive feature elimination down to exactly ``n_target`` features."""
    p = table.features.shape[1]
    if not 1 <= n_target <= p:
        raise ValueError(f"n_target must lie in 1..{p}, got {n_target}")
    y = table.labels.astype(float)
    x_full = _standardize(table.features)
    active = list(range(p))
    while len(active) > n_target:
        w, _, converged = _fit_logistic_l2(x_full[:, active], y)
        if not converged:
            logger.warning("RFE round with %d features did not converge", len(active))
        drop = max(1, int(0.1 * len(active)))
        drop = min(drop, len(active) - n_target)
        order = np.lexsort((np.arange(len(active)), np.abs(w)))
        doomed = {active[i] for i in order[:drop]}
        active = [a for a in active if a not in doomed]
    return tuple(active)


def rfe_ranking(table: FeatureTable) -> tuple[int, ...]:
    """Full elimination order as a ranking (last eliminated = most important)."""
    batches = _elimination_order(table)
    ranking: list[int] = []
    for batch in reversed(batches):
        ranking.extend(batch)
    return tuple(ranking)


def rank_by_iforest(table: FeatureTable, seed: int = 42) -> tuple[int, ...]:
    """Rank features by isolation-forest anomaly-score gap.

    Per feature, a one-dimensional forest (100 trees, subsample
    min(256, #cleans)) is fit on clean rows only; the feature score is the
    mean anomaly score of backdoor rows minus that of clean rows.
    """
    clean_rows = table.features[table.labels == 0]
    backdoor_rows = table.features[table.labels == 1]
    if len(clean_rows) < 8:
        raise TooFewCleansError(f"need at least 8 clean rows, got {len(clean_rows)}")
    gaps = np.zeros(table.features.shape[1])
    for j in range(table.features.shape[1]):
        forest = IsolationForest(
            n_estimators=100,
            max_samples=min(256, len(clean_rows)),
            random_state=seed,
        ).fit(clean_rows[:, j : j + 1])
        # score_samples returns the negated anomaly score; invert it.
        clean_anom = -forest.score_samples(clean_rows[:, j : j + 1]).mean()
        backdoor_anom = (
            -forest.score_samples(backdoor_rows[:, j : j + 1]).mean()
            if len(backdoor_rows)
            else clean_anom
        )
        gaps[j] = backdoor_anom - clean_anom
    return _rank_descending(gaps)


def sweep_subset(
    config: ConfigSet, ranking: Sequence[int], method: str = "topk"
) -> SelectionResult:
    """Calibrate every prefix of ``ranking``; keep the smallest prefix with
    the maximal F1."""
    ranking = tuple(int(i) for i in ranking)
    if sorted(ranking) != list(range(N_INDICATORS)):
        raise ValueError("ranking must be a permutation of 0..61")
    clean_stack, backdoor_stack = normalized_stacks(config)
    curve = []
    for n in range(1, N_INDICATORS + 1):
        _, f1 = profile_from_stacks(
            clean_stack, backdoor_stack, ranking[:n], config.k
        )
        curve.append(f1)
    best_n = 1 + int(np.argmax(curve))  # argmax takes the first (smallest) maximizer
    return SelectionResult(
        ranking=ranking,
        chosen=tuple(sorted(ranking[:best_n])),
        n=best_n,
        f1=curve[best_n - 1],
        method=method,
        curve=tuple(curve),
    )
