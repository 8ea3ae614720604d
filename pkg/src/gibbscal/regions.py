"""Credible-region constructors from posterior draws, plus membership tests.

Empirical quantiles use the inclusive order-statistic convention: the p-th
quantile of m sorted values is the max(1, ceil(p*m))-th order statistic.  No
interpolation, so constructions are deterministic and containment counts are
exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractViolationError, DegeneratePosteriorError, DomainError
from .gibbs import PosteriorDraws

__all__ = [
    "Interval",
    "EllipticalRegion",
    "DensityLevelRegion",
    "UniformBand",
    "hpd_interval",
    "elliptical_region",
    "hpd_density_region",
    "uniform_band",
    "contains",
    "region_to_json",
]


def order_stat_quantile(values: np.ndarray, p: float) -> float:
    """Inclusive order-statistic quantile: k = max(1, ceil(p*m))."""
    v = np.sort(np.asarray(values, dtype=float))
    k = max(1, int(np.ceil(p * v.shape[0])))
    return float(v[k - 1])


@dataclass
class Interval:
    lo: float
    hi: float
    level: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ContractViolationError("interval needs lo <= hi")


@dataclass
class EllipticalRegion:
    """Mahalanobis ball { theta : (theta-center)' shape^-1 (theta-center) <= threshold }."""

    center: np.ndarray
    shape: np.ndarray
    threshold: float
    level: float
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        self.shape = np.atleast_2d(np.asarray(self.shape, dtype=float))
        try:
            self._chol = cho_factor(self.shape, lower=True)
        except np.linalg.LinAlgError as e:
            raise DegeneratePosteriorError(f"shape matrix is not positive definite: {e}") from e

    def mahalanobis(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        d = thetas - self.center
        sol = cho_solve(self._chol, d.T)
        return (d.T * sol).sum(axis=0)


@dataclass
class DensityLevelRegion:
    """Draws whose unnormalized log-density clears a cut; the sample HPD set."""

    draws: PosteriorDraws
    log_cut: float
    level: float
    log_post_fn: Callable | None = None

    @property
    def retained(self) -> np.ndarray:
        return self.draws.draws[self.draws.log_post >= self.log_cut]


@dataclass
class UniformBand:
    """Constant-radius sup-norm band around a center curve on a grid."""

    grid: np.ndarray
    center_curve: np.ndarray
    radius: float
    level: float

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.center_curve = np.asarray(self.center_curve, dtype=float)
        if self.grid.shape != self.center_curve.shape:
            raise ContractViolationError("grid and center curve lengths differ")
        if self.radius < 0:
            raise ContractViolationError("band radius must be nonnegative")


# ---------------------------------------------------------------------------
# constructors


def hpd_interval(draws, alpha: float) -> Interval:
    """Shortest interval containing ceil((1-alpha)*m) of the sorted draws.

    Ties are broken toward the smallest lower endpoint.
    """
    d = np.sort(np.asarray(draws, dtype=float).ravel())
    m = d.shape[0]
    if m < 10:
        raise DomainError("need at least 10 draws for an HPD interval")
    if not 0.0 < alpha < 1.0:
        raise ContractViolationError("alpha must lie in (0, 1)")
    k = int(np.ceil((1.0 - alpha) * m))
    widths = d[k - 1 :] - d[: m - k + 1]
    i = int(np.argmin(widths))
    return Interval(float(d[i]), float(d[i + k - 1]), 1.0 - alpha)


def _elliptical_from_matrix(mat: np.ndarray, alpha: float) -> EllipticalRegion:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    m, q = mat.shape
    if m <= q + 1:
        raise ContractViolationError("need more than q+1 draws for an elliptical region")
    center = mat.mean(axis=0)
    shape = np.atleast_2d(np.cov(mat, rowvar=False, ddof=1))
    region = EllipticalRegion(center, shape, threshold=np.inf, level=1.0 - alpha)
    g = region.mahalanobis(mat)
    region.threshold = order_stat_quantile(g, 1.0 - alpha)
    return region


def elliptical_region(draws: PosteriorDraws, alpha: float) -> EllipticalRegion:
    """Ellipse from the draw mean/covariance, calibrated on the draws' own
    Mahalanobis distances."""
    return _elliptical_from_matrix(draws.draws, alpha)


def hpd_density_region(
    draws: PosteriorDraws, alpha: float, log_post_fn: Callable | None = None
) -> DensityLevelRegion:
    """Retain draws whose log-density reaches its alpha order-statistic cut.

    Membership of a new point requires ``log_post_fn`` (typically
    ``lambda th: log_post_unnorm(spec, th)``).
    """
    if not 0.0 <= alpha < 1.0:
        raise ContractViolationError("alpha must lie in [0, 1)")
    log_cut = order_stat_quantile(draws.log_post, alpha)
    return DensityLevelRegion(draws, log_cut, 1.0 - alpha, log_post_fn)


def uniform_band(curve_draws: np.ndarray, alpha: float, grid=None) -> UniformBand:
    """Pointwise-mean center with constant sup-norm radius at level 1-alpha."""
    curves = np.atleast_2d(np.asarray(curve_draws, dtype=float))
    if curves.shape[1] < 2:
        raise ContractViolationError("need a grid of at least 2 points")
    center = curves.mean(axis=0)
    dev = np.abs(curves - center).max(axis=1)
    radius = order_stat_quantile(dev, 1.0 - alpha)
    if grid is None:
        grid = np.arange(curves.shape[1], dtype=float)
    return UniformBand(np.asarray(grid, dtype=float), center, radius, 1.0 - alpha)


# ---------------------------------------------------------------------------
# membership


def contains(region, value) -> bool:
    """Membership of a parameter point (or curve, for bands) in the region."""
    if isinstance(region, Interval):
        v = float(np.asarray(value))
        return region.lo <= v <= region.hi
    if isinstance(region, EllipticalRegion):
        v = np.atleast_1d(np.asarray(value, dtype=float))
        if v.shape != region.center.shape:
            raise ContractViolationError("point dimension does not match region")
        return bool(region.mahalanobis(v[None])[0] <= region.threshold)
    if isinstance(region, DensityLevelRegion):
        if region.log_post_fn is None:
            raise ContractViolationError(
                "density-level region needs log_post_fn for membership tests"
            )
        return bool(region.log_post_fn(np.asarray(value, dtype=float)) >= region.log_cut)
    if isinstance(region, UniformBand):
        curve = np.asarray(value, dtype=float)
        if curve.shape != region.center_curve.shape:
            raise ContractViolationError("curve length does not match band grid")
        return bool(np.abs(curve - region.center_curve).max() <= region.radius)
    raise ContractViolationError(f"unknown region type {type(region).__name__}")


# ---------------------------------------------------------------------------
# serialization


def region_to_json(region) -> dict:
    if isinstance(region, Interval):
        return {"kind": "interval", "lo": region.lo, "hi": region.hi, "level": region.level}
    if isinstance(region, EllipticalRegion):
        return {
            "kind": "ellipse",
            "center": region.center.tolist(),
            "shape": region.shape.tolist(),
            "threshold": float(region.threshold),
            "level": region.level,
        }
    if isinstance(region, DensityLevelRegion):
        return {
            "kind": "density-level",
            "log_cut": float(region.log_cut),
            "level": region.level,
            "n_draws": int(region.draws.draws.shape[0]),
        }
    if isinstance(region, UniformBand):
        return {
            "kind": "band",
            "grid": region.grid.tolist(),
            "center": region.center_curve.tolist(),
            "radius": float(region.radius),
            "level": region.level,
        }
    raise ContractViolationError(f"unknown region type {type(region).__name__}")
