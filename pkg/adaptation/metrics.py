"""
Alignment and discriminability estimators and the dynamic balance factor.

MMD here is the linear estimator: the squared distance between the domain
feature means. Discriminability is the LDA ratio-trace criterion
trace((S_w + eps I)^-1 S_b). Both are min-max normalised against the running
extrema of the current run and folded into tau.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import linalg

from .exceptions import EstimatorError

logger = logging.getLogger(__name__)

INITIAL_TAU = 0.5
LDA_EPS = 1e-5


def _matrix(name, values):
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2 or array.shape[0] == 0:
        raise EstimatorError(f"{name} must be a non-empty matrix, got shape {array.shape}")
    return array


def mmd(source_features, target_features):
    """Squared Euclidean norm of the difference of the domain means."""
    xs = _matrix('source_features', source_features)
    xt = _matrix('target_features', target_features)
    if xs.shape[1] != xt.shape[1]:
        raise EstimatorError(f"feature width mismatch: {xs.shape[1]} vs {xt.shape[1]}")
    gap = xs.mean(axis=0) - xt.mean(axis=0)
    return float(gap @ gap)


@dataclass(frozen=True, eq=False)
class ScatterPair:
    between: np.ndarray
    within: np.ndarray
    class_counts: tuple


def scatter(features, labels, num_classes=None):
    """Between-class and within-class scatter matrices (unnormalised sums)."""
    x = _matrix('features', features)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise EstimatorError(f"expected {x.shape[0]} labels, got {y.shape}")
    k = int(y.max()) + 1 if num_classes is None else int(num_classes)
    if y.min() < 0 or y.max() >= k:
        raise EstimatorError(f"labels must lie in [0, {k})")

    width = x.shape[1]
    overall = x.mean(axis=0)
    between = np.zeros((width, width))
    within = np.zeros((width, width))
    counts = []
    for cls in range(k):
        members = x[y == cls]
        counts.append(len(members))
        if not len(members):
            continue
        centre = members.mean(axis=0)
        deviations = members - centre
        within += deviations.T @ deviations
        offset = centre - overall
        between += len(members) * np.outer(offset, offset)

    return ScatterPair(between=between, within=within, class_counts=tuple(counts))


def lda_criterion(pair, eps=LDA_EPS):
    """trace((S_w + eps I)^-1 S_b), the ratio-trace value of max_W J(W)."""
    if eps <= 0:
        raise EstimatorError(f"eps must be positive, got {eps}")
    regularised = pair.within + eps * np.eye(pair.within.shape[0])
    try:
        solved = linalg.solve(regularised, pair.between, assume_a='pos')
    except linalg.LinAlgError as e:
        raise EstimatorError(f"regularised within-class scatter is singular: {e}") from e
    value = float(np.trace(solved))
    if not math.isfinite(value):
        raise EstimatorError('lda criterion is not finite')
    return max(value, 0.0)


def discriminability(source_features, source_labels, target_features, target_pseudo_labels,
                     num_classes, eps=LDA_EPS):
    """J(W) on the pooled domains: true source labels plus target pseudo-labels."""
    features = np.vstack([_matrix('source_features', source_features),
                          _matrix('target_features', target_features)])
    labels = np.concatenate([np.asarray(source_labels), np.asarray(target_pseudo_labels)])
    return lda_criterion(scatter(features, labels, num_classes), eps)


@dataclass(frozen=True)
class BalanceState:
    """Running extrema of MMD and J(W) plus the current tau."""

    mmd_min: Optional[float] = None
    mmd_max: Optional[float] = None
    j_min: Optional[float] = None
    j_max: Optional[float] = None
    observation_count: int = 0
    tau: float = INITIAL_TAU
    mmd_normalized: Optional[float] = None
    j_normalized: Optional[float] = None


def _normalise(value, low, high):
    """Min-max scaling; undefined until two distinct values were observed."""
    if high <= low:
        return None
    return min(max((value - low) / (high - low), 0.0), 1.0)


def balance_factor(mmd_normalized, j_normalized):
    """tau = m / (m + (1 - j)), neutral 0.5 when undefined or 0/0."""
    if mmd_normalized is None or j_normalized is None:
        return INITIAL_TAU
    denominator = mmd_normalized + (1.0 - j_normalized)
    if denominator <= 0.0:
        return INITIAL_TAU
    return min(max(mmd_normalized / denominator, 0.0), 1.0)


def update_and_balance(state, mmd_value, j_value):
    """Fold one (MMD, J) observation into the extrema and recompute tau."""
    for label, value in (('mmd', mmd_value), ('j', j_value)):
        if not math.isfinite(value):
            raise EstimatorError(f"{label} observation is not finite: {value}")
        if value < 0:
            raise EstimatorError(f"{label} observation must be non-negative: {value}")

    if state.observation_count == 0:
        mmd_min = mmd_max = float(mmd_value)
        j_min = j_max = float(j_value)
    else:
        mmd_min, mmd_max = min(state.mmd_min, mmd_value), max(state.mmd_max, mmd_value)
        j_min, j_max = min(state.j_min, j_value), max(state.j_max, j_value)

    mmd_normalized = _normalise(mmd_value, mmd_min, mmd_max)
    j_normalized = _normalise(j_value, j_min, j_max)
    tau = balance_factor(mmd_normalized, j_normalized)
    logger.debug("tau=%.4f (mmd~=%s, j~=%s)", tau, mmd_normalized, j_normalized)

    return replace(
        state,
        mmd_min=float(mmd_min), mmd_max=float(mmd_max),
        j_min=float(j_min), j_max=float(j_max),
        observation_count=state.observation_count + 1,
        tau=tau,
        mmd_normalized=mmd_normalized,
        j_normalized=j_normalized,
    )
