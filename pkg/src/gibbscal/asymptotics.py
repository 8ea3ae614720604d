"""Plug-in sandwich estimation and Gaussian-shape diagnostics.

``sandwich_cov`` assembles Sigma = V^-1 S V^-1 from the risk Hessian V and
the score outer-product S.  ``oracle_learning_rate`` maps (Sigma, V) to the
learning rate {lambda_min(Sigma^1/2 V Sigma^1/2)}^(-1/3) that asymptotically
matches credible-region spread to the estimator's sampling spread; in the
scalar information-equality case Sigma = gamma V^-1 it returns gamma^(-1/3)
exactly.

The empirical risk of a kinked loss is piecewise linear, so plain finite
differences of R_n are useless for the Hessian.  ``estimate_risk_hessian``
differentiates a kernel-smoothed empirical risk instead: each loss kind
registers a surrogate in which the indicator (or ReLU corner) is replaced by
a Gaussian CDF smear of bandwidth h = h0 * n^(-1/5), with h0 the sample sd
of the kink argument.  Kinds without a surrogate fall back to plain central
differences with step n^(-1/4).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import cholesky, solve_triangular

from .errors import ContractViolationError, DomainError, SingularHessianError
from .gibbs import PosteriorDraws
from .losses import (
    CheckRegressionLoss,
    DataSet,
    HingeLoss,
    LossModel,
    McidLoss,
    QuantileLoss,
    ScaledLoss,
    SquaredErrorLoss,
)

__all__ = [
    "SandwichEstimate",
    "GaussianApprox",
    "HessianConfig",
    "estimate_score_outer",
    "estimate_risk_hessian",
    "sandwich_cov",
    "oracle_learning_rate",
    "bvm_approx",
    "bvm_distance",
]


@dataclass
class SandwichEstimate:
    """Risk Hessian V, score outer-product S, and Sigma = V^-1 S V^-1."""

    V: np.ndarray
    S: np.ndarray
    Sigma: np.ndarray


@dataclass
class GaussianApprox:
    """Large-sample Gaussian shape: mean eta*theta_hat + (1-eta)*theta_star,
    covariance (eta * n * V)^-1."""

    mean: np.ndarray
    cov: np.ndarray
    eta: float
    n: int


def estimate_score_outer(loss: LossModel, data: DataSet, theta) -> np.ndarray:
    """n^-1 sum of subgradient outer products at theta."""
    G = loss.subgrads(theta, data)
    return (G[:, :, None] * G[:, None, :]).mean(axis=0)


@dataclass
class HessianConfig:
    h0: float | None = None  # bandwidth scale; default: sd of the kink argument
    fd_step: float | None = None  # finite-difference step; default 0.1 * h


def _smoothed_losses(loss: LossModel, theta: np.ndarray, data: DataSet, h: float):
    """Gaussian-smoothed surrogate losses; None if the kind registers none."""
    base = loss
    c = 1.0
    while isinstance(base, ScaledLoss):
        c *= base.c
        base = base.base
    if isinstance(base, QuantileLoss):
        u = data.values[:, 0] - theta[0]
        return c * u * (base.tau - stats.norm.cdf(-u / h))
    if isinstance(base, CheckRegressionLoss):
        F = base.design(data)[0]
        u = data.y - F @ theta
        return c * u * (base.tau - stats.norm.cdf(-u / h))
    if isinstance(base, HingeLoss):
        YF = base.design(data)[0]
        z = 1.0 - YF @ theta
        return c * (z * stats.norm.cdf(z / h) + h * stats.norm.pdf(z / h))
    if isinstance(base, McidLoss):
        u = data.values[:, 0] - theta[0]
        y = data.values[:, 1]
        return c * 0.5 * (1.0 - y * (2.0 * stats.norm.cdf(u / h) - 1.0))
    return None


def _kink_argument(loss: LossModel, theta: np.ndarray, data: DataSet) -> np.ndarray | None:
    base = loss
    while isinstance(base, ScaledLoss):
        base = base.base
    if isinstance(base, QuantileLoss) or isinstance(base, McidLoss):
        return data.values[:, 0] - theta[0]
    if isinstance(base, CheckRegressionLoss):
        return data.y - base.design(data)[0] @ theta
    if isinstance(base, HingeLoss):
        return 1.0 - base.design(data)[0] @ theta
    return None


def estimate_risk_hessian(
    loss: LossModel, data: DataSet, theta, cfg: HessianConfig | None = None
) -> np.ndarray:
    """Central finite-difference Hessian of the (smoothed) empirical risk.

    Emits a warning if the symmetrized result is indefinite; no exception.
    """
    cfg = cfg or HessianConfig()
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    q = theta.shape[0]
    n = data.n

    arg = _kink_argument(loss, theta, data)
    smoothed = arg is not None and _smoothed_losses(loss, theta, data, 1.0) is not None
    if smoothed:
        h0 = cfg.h0 if cfg.h0 is not None else max(float(np.std(arg)), 1e-8)
        h = h0 * n ** (-1.0 / 5.0)
        step = cfg.fd_step if cfg.fd_step is not None else 0.1 * h

        def risk(th):
            return float(np.mean(_smoothed_losses(loss, th, data, h)))

    else:
        step = cfg.fd_step if cfg.fd_step is not None else n ** (-1.0 / 4.0)
        design = loss.design(data)

        def risk(th):
            return float(loss.risk_rows(tuple(a[None] for a in design), th[None])[0])

    H = np.empty((q, q))
    r0 = risk(theta)
    for i in range(q):
        ei = np.zeros(q)
        ei[i] = step
        H[i, i] = (risk(theta + ei) - 2.0 * r0 + risk(theta - ei)) / step**2
        for j in range(i + 1, q):
            ej = np.zeros(q)
            ej[j] = step
            H[i, j] = H[j, i] = (
                risk(theta + ei + ej)
                - risk(theta + ei - ej)
                - risk(theta - ei + ej)
                + risk(theta - ei - ej)
            ) / (4.0 * step**2)
    H = 0.5 * (H + H.T)
    if np.linalg.eigvalsh(H).min() < 0:
        warnings.warn("estimated risk Hessian is indefinite", RuntimeWarning)
    return H


def sandwich_cov(V: np.ndarray, S: np.ndarray) -> SandwichEstimate:
    """Sigma = V^-1 S V^-1; raises on singular V."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    try:
        Vinv_S = np.linalg.solve(V, S)
        Sigma = np.linalg.solve(V, Vinv_S.T).T
    except np.linalg.LinAlgError as e:
        raise SingularHessianError(f"risk Hessian is singular: {e}") from e
    Sigma = 0.5 * (Sigma + Sigma.T)
    return SandwichEstimate(V=V, S=S, Sigma=Sigma)


def _sym_sqrt(A: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    w, U = np.linalg.eigh(A)
    w = np.maximum(w, floor)
    return (U * np.sqrt(w)) @ U.T


def oracle_learning_rate(Sigma: np.ndarray, V: np.ndarray) -> float:
    """{lambda_min(Sigma^1/2 V Sigma^1/2)}^(-1/3) for PD Sigma and V."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if np.linalg.eigvalsh(Sigma).min() <= 0:
        raise DomainError("Sigma must be positive definite")
    if np.linalg.eigvalsh(V).min() <= 0:
        raise DomainError("V must be positive definite")
    half = _sym_sqrt(Sigma)
    lam_min = float(np.linalg.eigvalsh(half @ V @ half).min())
    return lam_min ** (-1.0 / 3.0)


def bvm_approx(eta: float, theta_hat, theta_star, V: np.ndarray, n: int) -> GaussianApprox:
    """Gaussian shape with mean eta*theta_hat + (1-eta)*theta_star and
    covariance (eta n V)^-1.  Pass theta_hat for both when the true risk
    minimizer is unknown."""
    if eta <= 0 or n < 1:
        raise ContractViolationError("need eta > 0 and n >= 1")
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    theta_star = np.atleast_1d(np.asarray(theta_star, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    mean = eta * theta_hat + (1.0 - eta) * theta_star
    cov = np.linalg.inv(eta * n * V)
    cov = 0.5 * (cov + cov.T)
    return GaussianApprox(mean=mean, cov=cov, eta=float(eta), n=int(n))


def bvm_distance(draws, approx: GaussianApprox) -> float:
    """Max over coordinates of the KS distance between whitened draws and
    the standard normal."""
    mat = draws.draws if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    mat = np.atleast_2d(mat)
    if mat.shape[1] != approx.mean.shape[0]:
        raise ContractViolationError("draw dimension does not match approximation")
    L = cholesky(approx.cov, lower=True)
    Z = solve_triangular(L, (mat - approx.mean).T, lower=True).T
    return float(max(stats.kstest(Z[:, j], "norm").statistic for j in range(Z.shape[1])))
