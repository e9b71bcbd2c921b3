"""System-wide aggregation of IDfN rows: mean, variance, and Gaussian KDE.

Also hosts the KDE machinery shared with the detector: cross-validated
bandwidth selection and the Wasserstein-1 distance between two KDEs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, ndtr

from .core import DataError, IdfnSeries, substream

SQRT_2PI = math.sqrt(2.0 * math.pi)
MIN_BANDWIDTH = 1e-6


def _active_row(idfn: IdfnSeries, t: int) -> np.ndarray:
    row = idfn.row(t)
    if row.size == 0:
        raise DataError(f"no active entities at tick {t}")
    return row


def row_mean(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("no active entities")
    return float(np.sum(values) / values.size)


def row_variance(values: np.ndarray) -> float:
    """Population variance (divide by the number of active entities)."""
    values = np.asarray(values, dtype=np.float64)
    m = row_mean(values)
    return float(np.sum((values - m) ** 2) / values.size)


def swas_mean(idfn: IdfnSeries, t: int) -> float:
    return row_mean(_active_row(idfn, t))


def swas_variance(idfn: IdfnSeries, t: int) -> float:
    return row_variance(_active_row(idfn, t))


@dataclass(frozen=True)
class Kde1d:
    """Gaussian-kernel density estimate with a single bandwidth."""

    centers: np.ndarray
    bandwidth: float

    def __post_init__(self):
        centers = np.sort(np.asarray(self.centers, dtype=np.float64).reshape(-1))
        if centers.size == 0:
            raise DataError("KDE needs at least one center")
        if not np.all(np.isfinite(centers)):
            raise DataError("KDE centers must be finite")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise DataError(f"bandwidth must be positive, got {self.bandwidth}")
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u = (x[..., None] - self.centers) / self.bandwidth
        return np.exp(-0.5 * u * u).sum(axis=-1) / (self.centers.size * self.bandwidth * SQRT_2PI)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return ndtr((x[..., None] - self.centers) / self.bandwidth).mean(axis=-1)

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u = (x[..., None] - self.centers) / self.bandwidth
        return logsumexp(-0.5 * u * u, axis=-1) - math.log(self.centers.size * self.bandwidth * SQRT_2PI)


def kde_fit(samples, h: float) -> Kde1d:
    if not h > 0:
        raise DataError(f"bandwidth must be positive, got {h}")
    return Kde1d(np.asarray(samples, dtype=np.float64), h)


def default_bandwidth_grid(samples, n: int = 20) -> np.ndarray:
    """``n`` log-spaced bandwidths between 0.01 and 10 sample standard deviations."""
    samples = np.asarray(samples, dtype=np.float64)
    sd = float(np.std(samples, ddof=1)) if samples.size > 1 else 0.0
    if sd == 0:
        raise DataError("cannot build a bandwidth grid for samples with zero spread")
    return np.maximum(np.geomspace(1e-2 * sd, 1e1 * sd, n), MIN_BANDWIDTH)


def fold_assignment(n: int, folds: int, seed: int = 0) -> np.ndarray:
    """Fold label for each position of the sorted samples, from a seeded shuffle."""
    order = substream(seed, 0).permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[order] = np.arange(n) % folds
    return labels


def cv_log_likelihood(samples, h: float, folds: int = 5, seed: int = 0) -> float:
    """Mean held-out log-likelihood of a KDE with bandwidth ``h`` under k-fold CV."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    labels = fold_assignment(x.size, folds, seed)
    total = 0.0
    for k in range(folds):
        held = x[labels == k]
        fit = x[labels != k]
        total += float(np.sum(Kde1d(fit, h).logpdf(held)))
    return total / x.size


def select_bandwidth(samples, grid=None, folds: int = 5, seed: int = 0) -> float:
    """Bandwidth maximising the k-fold CV log-likelihood; ties go to the smallest ``h``.

    Samples are sorted before folds are assigned, so the result does not
    depend on the order in which samples are given.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < folds:
        raise DataError(f"need at least {folds} samples for {folds}-fold CV, got {x.size}")
    if np.all(x == x[0]):
        raise DataError("all samples are identical; the CV likelihood is unbounded as h -> 0")
    grid = default_bandwidth_grid(x) if grid is None else np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise DataError("empty bandwidth grid")
    if np.any(grid <= 0):
        raise DataError("bandwidth candidates must be positive")
    if grid.size == 1:
        return float(grid[0])
    scores = np.array([cv_log_likelihood(x, h, folds, seed) for h in grid])
    if not np.any(np.isfinite(scores)):
        raise DataError("every bandwidth candidate gives -inf held-out likelihood")
    best = np.max(scores[np.isfinite(scores)])
    return float(np.min(grid[scores == best]))


def silverman_bandwidth(samples) -> float:
    """``1.06 * std * n**(-1/5)``, floored at ``MIN_BANDWIDTH``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise DataError("Silverman's rule needs at least 2 samples")
    return max(1.06 * float(np.std(x, ddof=1)) * x.size ** -0.2, MIN_BANDWIDTH)


def wasserstein1(f: Kde1d, g: Kde1d, n_grid: int = 512) -> float:
    """W1 distance: trapezoid integral of ``|F - G|`` over a shared uniform grid.

    The grid spans six of the larger bandwidth beyond the extreme centers of
    both estimates.
    """
    h = max(f.bandwidth, g.bandwidth)
    lo = min(f.centers[0], g.centers[0]) - 6.0 * h
    hi = max(f.centers[-1], g.centers[-1]) + 6.0 * h
    x = np.linspace(lo, hi, n_grid)
    return float(np.trapezoid(np.abs(f.cdf(x) - g.cdf(x)), x))


def compress_centers(values, max_centers: int = 512) -> np.ndarray:
    """Evenly spaced empirical quantiles standing in for a large sample set."""
    x = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if x.size <= max_centers:
        return x
    probs = (np.arange(max_centers) + 0.5) / max_centers
    return np.quantile(x, probs)
