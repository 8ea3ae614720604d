"""Gibbs posteriors: priors, the unnormalized log-density, and a sampler.

The posterior for a loss ``l``, prior ``pi``, learning rate ``eta`` and a
dataset of size ``n`` has unnormalized log-density

    log pi_n(theta) = -eta * n * R_n(theta) + log pi(theta),

with ``R_n`` the empirical risk.  Sampling uses adaptive random-walk
Metropolis: Gaussian proposals whose scalar step size follows a
Robbins-Monro recursion toward a target acceptance rate and whose shape is
refreshed from the empirical covariance of the burn-in draws.  All
adaptation happens during burn-in only, so the post-burn-in kernel is a
fixed, reversible Metropolis kernel.

Chains are driven entirely by pre-generated random streams, one per chain
seed, which makes a chain's output a pure function of its seed regardless
of how many chains are stepped together in a vectorized block.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolationError,
    DomainError,
    InitializationError,
    IntegrabilityError,
)
from .losses import (
    CheckRegressionLoss,
    DataSet,
    HingeLoss,
    LossModel,
    McidLoss,
    QuantileLoss,
    ScaledLoss,
    SquaredErrorLoss,
    erm_fit,
)

__all__ = [
    "Prior",
    "FlatPrior",
    "GaussianPrior",
    "GibbsSpec",
    "SamplerConfig",
    "PosteriorDraws",
    "DiscreteGrid",
    "log_prior",
    "log_post_unnorm",
    "sample_gibbs",
    "bissiri_objective",
    "gibbs_weights_discrete",
]


# ---------------------------------------------------------------------------
# priors


class Prior:
    def log_rows(self, thetas: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def check_dim(self, q: int):
        pass

    def scale_cap(self) -> float | None:
        """Upper bound on the posterior scale implied by the prior, if any."""
        return None


class FlatPrior(Prior):
    """Improper constant prior; log-density identically zero."""

    kind = "flat"

    def log_rows(self, thetas):
        return np.zeros(thetas.shape[:-1])


class GaussianPrior(Prior):
    """Independent Gaussian coordinates (additive constant dropped)."""

    kind = "gaussian"

    def __init__(self, mean, sd):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.sd = np.atleast_1d(np.asarray(sd, dtype=float))
        if self.mean.shape != self.sd.shape:
            raise ContractViolationError("prior mean and sd must have equal length")
        if np.any(self.sd <= 0):
            raise ContractViolationError("prior sd entries must be positive")

    def log_rows(self, thetas):
        z = (thetas - self.mean) / self.sd
        return -0.5 * (z * z).sum(axis=-1)

    def check_dim(self, q):
        if self.mean.shape[0] != q:
            raise ContractViolationError(
                f"prior dimension {self.mean.shape[0]} does not match param_dim {q}"
            )

    def scale_cap(self):
        return float(self.sd.max())


def log_prior(prior: Prior, theta) -> float:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    prior.check_dim(theta.shape[0])
    return float(prior.log_rows(theta[None])[0])


# ---------------------------------------------------------------------------
# flat-prior integrability screening

_flat_ok_cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def _weak_separating_direction_exists(YF: np.ndarray) -> bool:
    """Is there v != 0 with every margin y_i f(x_i)' v >= 0?

    Checked with 2q small linear programs: maximize t subject to
    YF v >= t, |v| <= 1 and one coordinate of v pinned to +-1.
    """
    from scipy.optimize import linprog

    n, q = YF.shape
    # variables (v_1..v_q, t); minimize -t
    c = np.zeros(q + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-YF, np.ones((n, 1))])
    b_ub = np.zeros(n)
    for j in range(q):
        for sign in (1.0, -1.0):
            bounds = [(-1.0, 1.0)] * q + [(None, 1.0)]
            bounds[j] = (sign, sign)
            res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
            if res.status == 0 and -res.fun >= 0.0:
                return True
    return False


def _flat_prior_reason(loss: LossModel, data: DataSet) -> str | None:
    """None if the empirical risk grows without bound along every ray."""
    base = loss
    while isinstance(base, ScaledLoss):
        base = base.base
    if isinstance(base, QuantileLoss):
        return None
    if isinstance(base, McidLoss):
        return "mcid loss is bounded, so exp(-eta n R_n) is not integrable under a flat prior"
    if isinstance(base, (CheckRegressionLoss, SquaredErrorLoss)):
        F = base.design(data)[0]
        if np.linalg.matrix_rank(F) < base.param_dim:
            return "design matrix is rank deficient; risk is constant along a direction"
        return None
    if isinstance(base, HingeLoss):
        YF = base.design(data)[0]
        if np.linalg.matrix_rank(YF) < base.param_dim:
            return "design matrix is rank deficient; risk is constant along a direction"
        if _weak_separating_direction_exists(YF):
            return "data admit a weakly separating direction; hinge risk stays bounded along it"
        return None
    return f"no integrability rule registered for loss kind {base.kind!r}"


def _check_flat_ok(loss: LossModel, data: DataSet):
    per_loss = _flat_ok_cache.get(data)
    if per_loss is None:
        per_loss = {}
        _flat_ok_cache[data] = per_loss
    key = id(loss)
    reason = per_loss.get(key, "?")
    if reason == "?":
        reason = _flat_prior_reason(loss, data)
        per_loss[key] = reason
    if reason is not None:
        raise IntegrabilityError(f"flat prior rejected: {reason}")


# ---------------------------------------------------------------------------
# posterior spec


@dataclass(eq=False)
class GibbsSpec:
    """Loss + prior + learning rate bound to a dataset."""

    loss: LossModel
    prior: Prior
    eta: float
    data: DataSet

    def __post_init__(self):
        if not self.eta > 0:
            raise ContractViolationError("learning rate eta must be positive")
        self.prior.check_dim(self.loss.param_dim)
        if isinstance(self.prior, FlatPrior):
            _check_flat_ok(self.loss, self.data)

    def log_post(self, theta) -> float:
        return log_post_unnorm(self, theta)


def log_post_unnorm(spec: GibbsSpec, theta) -> float:
    """-eta * n * R_n(theta) + log prior(theta)."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if not np.all(np.isfinite(theta)):
        raise DomainError("theta contains non-finite entries")
    design = tuple(a[None] for a in spec.loss.design(spec.data))
    risk = spec.loss.risk_rows(design, theta[None])[0]
    return float(-spec.eta * spec.data.n * risk + spec.prior.log_rows(theta[None])[0])


# ---------------------------------------------------------------------------
# sampler


@dataclass
class SamplerConfig:
    n_draws: int = 2000
    burn_in: int = 1000
    thin: int = 1
    init: object = "erm"  # "erm" or an explicit theta vector
    target_accept: float | None = None  # default 0.44 for q=1, 0.234 otherwise
    adapt_window: int = 100

    def __post_init__(self):
        if self.n_draws < 1 or self.thin < 1 or self.burn_in < 0 or self.adapt_window < 2:
            raise ContractViolationError("invalid sampler configuration")
        if self.target_accept is not None and not 0.0 < self.target_accept < 1.0:
            raise ContractViolationError("target_accept must lie in (0, 1)")


@dataclass
class PosteriorDraws:
    """Sampled parameter values with per-draw unnormalized log-density."""

    draws: np.ndarray  # (n_draws, q)
    log_post: np.ndarray  # (n_draws,)
    accept_rate: float
    seed: int


def _init_scales(loss, prior, datasets, etas, inits):
    """Heuristic initial proposal sd per chain; adaptation does the rest.

    The scale is read off the posterior log-density drop over a probe step of
    length ``cap`` from the initial point, so it depends on the loss and eta
    only through eta * loss (matching the posterior's own invariance).
    """
    n = datasets[0].n
    cap_prior = prior.scale_cap()
    q = loss.param_dim
    u = np.ones(q) / math.sqrt(q)
    s0 = np.empty(len(datasets))
    for b, ds in enumerate(datasets):
        cap = cap_prior if cap_prior is not None else loss.start_scale(ds)
        design = tuple(a[None] for a in loss.design(ds))
        r0 = loss.risk_rows(design, inits[b][None])[0]
        rp = loss.risk_rows(design, (inits[b] + cap * u)[None])[0]
        drop = etas[b] * n * max(rp - r0, 0.0)
        s0[b] = cap / math.sqrt(max(drop, 1.0))
    return np.maximum(s0, 1e-8)


def _sample_batch(loss, prior, datasets, etas, cfg: SamplerConfig, seeds, inits):
    """Run one adaptive RWM chain per dataset, stepped together.

    Every chain consumes only its own pre-generated random stream, so the
    result per chain is a pure function of (loss, prior, dataset, eta, cfg,
    seed, init) and does not depend on which chains share the block.

    Returns (draws (B, n_draws, q), log_post (B, n_draws), accept_rate (B,)).
    """
    B = len(datasets)
    q = loss.param_dim
    n = datasets[0].n
    if any(ds.n != n for ds in datasets):
        raise ContractViolationError("all datasets in a block must share n")
    if q < 1:
        raise ContractViolationError("parameter dimension must be >= 1")
    etas = np.asarray(etas, dtype=float)
    design = loss.stack_designs(datasets)
    eta_n = etas * n
    risk_rows = loss.risk_fn(design)
    flat = isinstance(prior, FlatPrior)

    def logpost_rows(thetas):
        lp = -eta_n * risk_rows(thetas)
        if not flat:
            lp += prior.log_rows(thetas)
        return lp

    T = cfg.burn_in + cfg.n_draws * cfg.thin
    Z = np.empty((T, B, q))
    LOGU = np.empty((T, B))
    for b, s in enumerate(seeds):
        rng = np.random.default_rng(int(s) & ((1 << 64) - 1))
        Z[:, b, :] = rng.standard_normal((T, q))
        LOGU[:, b] = np.log(rng.random(T))

    theta = np.array(inits, dtype=float).reshape(B, q).copy()
    logp = logpost_rows(theta)
    if not np.all(np.isfinite(logp)):
        raise InitializationError("log posterior is not finite at the initial point")

    target = cfg.target_accept if cfg.target_accept is not None else (0.44 if q == 1 else 0.234)
    base_mult = 2.38 / math.sqrt(q)
    log_scale = np.full(B, math.log(base_mult))
    L = np.zeros((B, q, q))
    s0 = _init_scales(loss, prior, datasets, etas, theta)
    for b, ds in enumerate(datasets):
        P = loss.proposal_precondition(ds)
        if P is None:
            L[b] = np.eye(q)
        else:
            try:
                L[b] = np.linalg.cholesky(P)
            except np.linalg.LinAlgError:
                L[b] = np.eye(q)
    L *= s0[:, None, None]

    burn = cfg.burn_in
    # chain-major history: per-chain blocks are contiguous and identical in
    # layout whatever the block size, so adaptation is grouping-independent
    hist = np.empty((B, burn, q)) if burn else None
    gammas = (np.arange(1, burn + 1, dtype=float)) ** -0.6 if burn else None
    jitter = 1e-12

    out = np.empty((cfg.n_draws, B, q))
    out_lp = np.empty((cfg.n_draws, B))
    accepted = np.zeros(B)
    kept = 0

    for t in range(T):
        z = Z[t]
        step = (L * z[:, None, :]).sum(axis=-1)
        prop = theta + np.exp(log_scale)[:, None] * step
        lp = logpost_rows(prop)
        delta = lp - logp
        acc = LOGU[t] < delta
        theta = np.where(acc[:, None], prop, theta)
        logp = np.where(acc, lp, logp)

        if t < burn:
            hist[:, t] = theta
            a = np.exp(np.minimum(delta, 0.0))
            log_scale += gammas[t] * (a - target)
            tp1 = t + 1
            if tp1 % cfg.adapt_window == 0 and tp1 <= burn - cfg.adapt_window:
                for b in range(B):
                    X = hist[b, :tp1]
                    mu = X.mean(axis=0)
                    D = X - mu
                    C = (D.T @ D) / (tp1 - 1)
                    diag = np.diagonal(C)
                    if np.all(diag > 0):
                        try:
                            L[b] = np.linalg.cholesky(C + jitter * diag.mean() * np.eye(q))
                            log_scale[b] = math.log(base_mult)
                        except np.linalg.LinAlgError:
                            pass
        else:
            k = t - burn
            if k % cfg.thin == 0:
                out[kept] = theta
                out_lp[kept] = logp
                kept += 1
            accepted += acc

    accept_rate = accepted / max(1, cfg.n_draws * cfg.thin)
    return out.transpose(1, 0, 2), out_lp.T.copy(), accept_rate


def sample_gibbs(spec: GibbsSpec, cfg: SamplerConfig, seed: int) -> PosteriorDraws:
    """Draw from the Gibbs posterior; deterministic in ``seed``."""
    if isinstance(cfg.init, str) and cfg.init == "erm":
        init = erm_fit(spec.loss, spec.data).theta
    else:
        init = np.atleast_1d(np.asarray(cfg.init, dtype=float))
        if init.shape != (spec.loss.param_dim,):
            raise ContractViolationError("init theta has the wrong dimension")
    draws, lp, acc = _sample_batch(
        spec.loss, spec.prior, [spec.data], np.array([spec.eta]), cfg, [seed], init[None]
    )
    return PosteriorDraws(draws[0], lp[0], float(acc[0]), int(seed))


# ---------------------------------------------------------------------------
# discrete-grid functional checks


@dataclass
class DiscreteGrid:
    """Finitely supported candidate posterior: points, prior weights, risks."""

    points: np.ndarray  # (k, q)
    prior_weights: np.ndarray  # (k,)
    risk_values: np.ndarray  # (k,)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.prior_weights = np.asarray(self.prior_weights, dtype=float)
        self.risk_values = np.asarray(self.risk_values, dtype=float)
        k = self.points.shape[0]
        if self.prior_weights.shape != (k,) or self.risk_values.shape != (k,):
            raise ContractViolationError("grid arrays must share the leading length")
        if np.any(self.prior_weights < 0) or abs(self.prior_weights.sum() - 1.0) > 1e-12:
            raise ContractViolationError("prior_weights must be a simplex vector")

    @classmethod
    def from_data(cls, points, prior_weights, loss: LossModel, data: DataSet):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        design = tuple(a[None] for a in loss.design(data))
        risks = np.array(
            [loss.risk_rows(design, th[None])[0] for th in points]
        )
        return cls(points, prior_weights, risks)


def bissiri_objective(grid: DiscreteGrid, weights, eta: float, n: int) -> float:
    """Average risk plus (eta n)^-1 KL(weights || prior weights)."""
    w = np.asarray(weights, dtype=float)
    if w.shape != grid.prior_weights.shape:
        raise ContractViolationError("weights length does not match grid")
    if np.any(w < -1e-15) or abs(w.sum() - 1.0) > 1e-9:
        raise ContractViolationError("weights must be a simplex vector")
    w = np.maximum(w, 0.0)
    p = grid.prior_weights
    if np.any((w > 0) & (p == 0)):
        raise DomainError("weights put mass where the prior weight is zero (infinite KL)")
    pos = w > 0
    kl = float(np.sum(w[pos] * np.log(w[pos] / p[pos])))
    return float(np.sum(w * grid.risk_values) + kl / (eta * n))


def gibbs_weights_discrete(grid: DiscreteGrid, eta: float, n: int) -> np.ndarray:
    """Weights proportional to prior * exp(-eta n R_n); log-sum-exp stabilized."""
    if not np.any(grid.prior_weights > 0):
        raise ContractViolationError("at least one prior weight must be positive")
    with np.errstate(divide="ignore"):
        logw = np.where(
            grid.prior_weights > 0,
            np.log(np.where(grid.prior_weights > 0, grid.prior_weights, 1.0))
            - eta * n * grid.risk_values,
            -np.inf,
        )
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()
