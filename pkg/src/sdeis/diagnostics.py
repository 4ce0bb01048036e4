"""Statistics of weighted path ensembles.

All reductions work from log weights and subtract the maximum before
exponentiating, so adding a constant to every log weight changes nothing.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyEnsemble, NonPositiveValue, OutOfRangeStep


@dataclass(frozen=True)
class EnsembleStats:
    q_rel_var: float
    n_eff: float
    n_samples: int
    log_weight_max: float
    failed: int = 0


@dataclass(frozen=True)
class WeightedHistogram:
    edges: np.ndarray
    masses: np.ndarray
    coordinate: int

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def _log_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float).ravel()
    if lw.size == 0:
        raise EmptyEnsemble("no samples")
    if not np.all(np.isfinite(lw)):
        raise ValueError("log weights must be finite")
    return lw


def normalized_weights(log_weights) -> np.ndarray:
    lw = _log_weights(log_weights)
    w = np.exp(lw - lw.max())
    return w / w.sum()


def relative_variance(log_weights, failed: int = 0) -> EnsembleStats:
    """Q = Var[W] / E[W]^2 with the population variance, and n_eff = M / (1 + Q)."""
    if hasattr(log_weights, "log_weights"):
        failed = getattr(log_weights, "failed", failed)
        log_weights = log_weights.log_weights
    lw = _log_weights(log_weights)
    m = lw.size
    top = lw.max()
    w = np.exp(lw - top)
    q = m * np.sum(w * w) / np.sum(w) ** 2 - 1.0
    # Q >= 0 exactly; only rounding makes it negative
    q = max(q, 0.0)
    return EnsembleStats(float(q), float(m / (1.0 + q)), int(m), float(top), int(failed))


def _column(ensemble, step: int, coordinate: int) -> np.ndarray:
    paths = np.asarray(ensemble.paths)
    if len(paths) == 0:
        raise EmptyEnsemble("no samples")
    n_steps, dim = paths.shape[1], paths.shape[2]
    if not 1 <= step <= n_steps:
        raise OutOfRangeStep(f"step {step} outside [1, {n_steps}]")
    if not 0 <= coordinate < dim:
        raise OutOfRangeStep(f"coordinate {coordinate} outside [0, {dim})")
    return paths[:, step - 1, coordinate]


def weighted_quantiles(values, weights, probs) -> np.ndarray:
    """Inverse of the weighted empirical distribution function."""
    order = np.argsort(values, kind="stable")
    v, w = np.asarray(values)[order], np.asarray(weights)[order]
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    idx = np.searchsorted(cdf, np.asarray(probs, dtype=float), side="left")
    return v[np.clip(idx, 0, v.size - 1)]


def histogram_edges(values, weights, bins: int = 50, lower=0.001, upper=0.999) -> np.ndarray:
    lo, hi = weighted_quantiles(values, weights, [lower, upper])
    if not hi > lo:
        half = 0.5 * max(abs(lo), 1.0) * 1e-3
        lo, hi = lo - half, hi + half
    return np.linspace(lo, hi, bins + 1)


def weighted_marginal(ensemble, step: int, coordinate: int = 0, bins=50) -> WeightedHistogram:
    """Normalized weighted histogram of one coordinate at step ``step`` (1-based).

    ``bins`` is either a bin count, giving uniform bins over the weighted
    0.1%-99.9% quantile range, or an explicit increasing array of edges.
    Samples outside the range are counted in the first or last bin, so the
    masses always sum to one.
    """
    x = _column(ensemble, step, coordinate)
    w = normalized_weights(ensemble.log_weights)
    if np.ndim(bins) == 0:
        if int(bins) < 2:
            raise ValueError("need at least 2 bins")
        edges = histogram_edges(x, w, int(bins))
    else:
        edges = np.asarray(bins, dtype=float)
        if edges.size < 3 or np.any(np.diff(edges) <= 0):
            raise ValueError("edges must be strictly increasing with at least 2 bins")
    which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, edges.size - 2)
    masses = np.bincount(which, weights=w, minlength=edges.size - 1)
    return WeightedHistogram(edges, masses / masses.sum(), coordinate)


def mode_mass(ensemble, step: int, coordinate: int = 0, threshold: float = 0.0):
    """Weighted mass strictly below and at-or-above ``threshold``."""
    x = _column(ensemble, step, coordinate)
    w = normalized_weights(ensemble.log_weights)
    below = min(float(np.sum(w[x < threshold])), 1.0)
    return below, 1.0 - below


def crossings_per_path(paths, coordinate: int = 0, start=None) -> np.ndarray:
    """Sign changes of one coordinate along each path.

    A zero takes the sign of the last nonzero entry before it. When
    ``start`` is given it is prepended to every path.
    """
    x = np.asarray(paths, dtype=float)[..., coordinate]
    if x.ndim == 1:
        x = x[None]
    if start is not None:
        s0 = np.atleast_1d(np.asarray(start, dtype=float))[coordinate]
        x = np.concatenate([np.full((x.shape[0], 1), s0), x], axis=1)
    sign = np.sign(x)
    # carry the last nonzero sign forward over zeros
    for j in range(1, sign.shape[1]):
        zero = sign[:, j] == 0
        sign[zero, j] = sign[zero, j - 1]
    a, b = sign[:, :-1], sign[:, 1:]
    return np.count_nonzero((a != 0) & (b != 0) & (a != b), axis=1)


def zero_crossings(ensemble, coordinate: int = 0, include_start: bool = True) -> float:
    """Unweighted mean number of sign changes per path."""
    paths = np.asarray(ensemble.paths)
    if len(paths) == 0:
        raise EmptyEnsemble("no samples")
    start = getattr(ensemble, "start", None) if include_start else None
    return float(np.mean(crossings_per_path(paths, coordinate, start)))


def loglog_slope(points: Sequence) -> tuple:
    """Least-squares line through (log eps, log q); returns (slope, intercept)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("need at least two (epsilon, q) points")
    if np.any(~(pts > 0)):
        raise NonPositiveValue("log-log fit needs positive values")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    if np.ptp(lx) == 0:
        raise ValueError("epsilon values must not all coincide")
    slope, intercept = np.polyfit(lx, ly, 1)
    return float(slope), float(intercept)


def weighted_moments(ensemble, step: Optional[int] = None):
    """Self-normalized mean and covariance of the state at ``step`` (default last),
    plus delta-method standard errors of the mean."""
    paths = np.asarray(ensemble.paths)
    step = paths.shape[1] if step is None else step
    x = np.stack([_column(ensemble, step, c) for c in range(paths.shape[2])], axis=-1)
    w = normalized_weights(ensemble.log_weights)
    mean = w @ x
    dev = x - mean
    cov = (w[:, None] * dev).T @ dev
    # delta-method standard error of a self-normalized mean
    se = np.sqrt(np.sum((w[:, None] * dev) ** 2, axis=0))
    return mean, cov, se
