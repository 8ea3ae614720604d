"""Loss families, empirical risk, subgradients, and the empirical risk minimizer.

A loss model maps a parameter vector ``theta`` and one observation to a real
number.  The built-in families:

``quantile(tau)``
    ``(t - theta) * (tau - 1[t <= theta])`` for scalar observations.
``mcid``
    ``0.5 * (1 - y * sign(x - theta))`` for ``(x, y)`` pairs with labels in
    {-1, +1}; ``sign(0)`` is taken as +1.
``check-regression(tau, basis)``
    ``(y - theta @ f(x)) * (tau - 1[y < theta @ f(x)])``.
``hinge(basis)``
    ``max(0, 1 - y * theta @ f(x))``.
``squared-error(basis)``
    ``(y - theta @ f(x)) ** 2``.

Observations live in a :class:`DataSet`: an ``(n, width)`` float matrix.  For
supervised problems the covariates occupy columns ``[:split_index]`` and the
response is the column at ``split_index``.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import ContractViolationError, DomainError, UnsupportedOperationError

__all__ = [
    "Basis",
    "DataSet",
    "OptimizerConfig",
    "ThetaEstimate",
    "LossModel",
    "QuantileLoss",
    "McidLoss",
    "CheckRegressionLoss",
    "HingeLoss",
    "SquaredErrorLoss",
    "ScaledLoss",
    "basis_eval",
    "eval_loss",
    "loss_subgradient",
    "empirical_risk",
    "erm_fit",
]


# ---------------------------------------------------------------------------
# data containers


@dataclass(frozen=True, eq=False)
class DataSet:
    """Immutable matrix of observations.

    Parameters
    ----------
    values : (n, width) array
        One observation per row; all entries finite.
    split_index : int or None
        Column position separating covariates from the response.  ``None``
        for unsupervised records (e.g. plain samples for quantile loss).
    """

    values: np.ndarray
    split_index: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1:
            raise ContractViolationError("values must be a nonempty (n, width) matrix")
        if not np.all(np.isfinite(v)):
            raise DomainError("dataset contains non-finite entries")
        if self.split_index is not None:
            if not 0 <= self.split_index < v.shape[1]:
                raise ContractViolationError(
                    f"split_index {self.split_index} out of range for width {v.shape[1]}"
                )
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def record_width(self) -> int:
        return self.values.shape[1]

    @property
    def x(self) -> np.ndarray:
        if self.split_index is None:
            raise ContractViolationError("dataset has no declared covariate/response split")
        return self.values[:, : self.split_index]

    @property
    def y(self) -> np.ndarray:
        if self.split_index is None:
            raise ContractViolationError("dataset has no declared covariate/response split")
        return self.values[:, self.split_index]


@dataclass(frozen=True)
class Basis:
    """Dictionary of functions applied to the covariate vector.

    kind "affine" maps x to (1, x_1, ..., x_r); "polynomial" maps a scalar x
    to (1, x, ..., x**degree); "identity" returns x unchanged.
    """

    kind: str
    degree: int | None = None
    input_dim: int = 1

    def __post_init__(self):
        if self.kind not in ("affine", "polynomial", "identity"):
            raise ContractViolationError(f"unknown basis kind {self.kind!r}")
        if self.kind == "polynomial":
            if self.degree is None or self.degree < 1:
                raise ContractViolationError("polynomial basis needs degree >= 1")
            if self.input_dim != 1:
                raise ContractViolationError("polynomial basis is for scalar inputs")

    @property
    def output_dim(self) -> int:
        if self.kind == "affine":
            return self.input_dim + 1
        if self.kind == "polynomial":
            return self.degree + 1
        return self.input_dim

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Map covariate rows (n, input_dim) to feature rows (n, output_dim)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != self.input_dim:
            raise ContractViolationError(
                f"basis expects input dim {self.input_dim}, got {x.shape[1]}"
            )
        if self.kind == "affine":
            return np.hstack([np.ones((x.shape[0], 1)), x])
        if self.kind == "polynomial":
            return np.vander(x[:, 0], self.degree + 1, increasing=True)
        return x


def basis_eval(basis: Basis, x) -> np.ndarray:
    """Evaluate the basis at a single covariate point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return basis.expand(x[None, :])[0]


# ---------------------------------------------------------------------------
# loss models


class LossModel:
    """Base class; concrete losses implement the vectorized kernels below."""

    kind: str = ""
    param_dim: int = 1
    has_subgradient: bool = False

    def __init__(self):
        self._design_cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_design_cache"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._design_cache = weakref.WeakKeyDictionary()

    # -- design arrays ------------------------------------------------------

    def _build_design(self, data: DataSet) -> tuple:
        raise NotImplementedError

    def design(self, data: DataSet) -> tuple:
        """Per-dataset precomputed arrays (cached; datasets are immutable)."""
        d = self._design_cache.get(data)
        if d is None:
            d = self._build_design(data)
            self._design_cache[data] = d
        return d

    def stack_designs(self, datasets: list[DataSet]) -> tuple:
        """Stack equally-shaped designs along a leading batch axis."""
        parts = [self.design(d) for d in datasets]
        return tuple(np.ascontiguousarray(np.stack(p, axis=0)) for p in zip(*parts))

    # -- kernels ------------------------------------------------------------

    def losses_from_design(self, design: tuple, thetas: np.ndarray) -> np.ndarray:
        """Per-record losses for a batch: thetas (B, q) -> (B, n)."""
        raise NotImplementedError

    def risk_rows(self, design: tuple, thetas: np.ndarray) -> np.ndarray:
        return self.losses_from_design(design, thetas).mean(axis=-1)

    def risk_fn(self, design: tuple):
        """Closure computing risk_rows with reusable scratch buffers.

        The returned callable maps thetas (B, q) -> risks (B,) and is the
        sampler's hot path; per-loss overrides avoid temporaries.
        """

        def risk(thetas):
            return self.losses_from_design(design, thetas).mean(axis=-1)

        return risk

    # -- public single-theta interface --------------------------------------

    def _check_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.param_dim,):
            raise ContractViolationError(
                f"theta has dimension {theta.shape}, expected ({self.param_dim},)"
            )
        if not np.all(np.isfinite(theta)):
            raise DomainError("theta contains non-finite entries")
        return theta

    def losses(self, theta, data: DataSet) -> np.ndarray:
        theta = self._check_theta(theta)
        design = tuple(a[None] for a in self.design(data))
        return self.losses_from_design(design, theta[None])[0]

    def subgrads(self, theta, data: DataSet) -> np.ndarray:
        """Per-record subgradients, shape (n, param_dim)."""
        raise UnsupportedOperationError(f"{self.kind} loss has no subgradient")

    # -- miscellany ----------------------------------------------------------

    def lstsq_seed(self, data: DataSet) -> np.ndarray:
        """Cheap data-driven starting point for the simplex optimizer."""
        return np.zeros(self.param_dim)

    def start_scale(self, data: DataSet) -> float:
        return 1.0

    def proposal_precondition(self, data: DataSet) -> np.ndarray | None:
        """Initial proposal covariance shape for the sampler, or None for
        identity.  Basis losses whiten by the inverse Gram matrix, which
        matters when the basis columns are strongly collinear."""
        return None


def _validate_labels(y: np.ndarray):
    if not np.all(np.isin(y, (-1.0, 1.0))):
        bad = y[~np.isin(y, (-1.0, 1.0))][0]
        raise ContractViolationError(f"classification labels must be -1 or +1, found {bad}")


class QuantileLoss(LossModel):
    """Asymmetric absolute-error loss whose risk minimizer is the tau-quantile."""

    has_subgradient = True
    param_dim = 1

    def __init__(self, tau: float):
        super().__init__()
        if not 0.0 < tau < 1.0:
            raise ContractViolationError("tau must lie in (0, 1)")
        self.tau = float(tau)
        self.kind = "quantile"

    def _build_design(self, data: DataSet) -> tuple:
        if data.record_width != 1:
            raise ContractViolationError("quantile loss expects width-1 records")
        return (data.values[:, 0],)

    def losses_from_design(self, design, thetas):
        (t,) = design
        u = t - thetas[..., 0:1]
        return u * (self.tau - (u <= 0.0))

    def risk_fn(self, design):
        (t,) = design
        # pinball identity: u * (tau - 1[u <= 0]) == max(tau*u, (tau-1)*u)
        u = np.empty_like(t)
        a = np.empty_like(t)
        tau = self.tau
        out = np.empty(t.shape[0])

        def risk(thetas):
            np.subtract(t, thetas[:, 0:1], out=u)
            np.multiply(u, tau - 1.0, out=a)
            np.multiply(u, tau, out=u)
            np.maximum(u, a, out=u)
            return np.mean(u, axis=-1, out=out)

        return risk

    def subgrads(self, theta, data):
        theta = self._check_theta(theta)
        (t,) = self.design(data)
        u = t - theta[0]
        return np.where(u <= 0.0, 1.0 - self.tau, -self.tau)[:, None]

    def lstsq_seed(self, data):
        return np.array([float(np.median(data.values[:, 0]))])

    def start_scale(self, data):
        return max(float(np.std(data.values[:, 0])), 1.0)


class McidLoss(LossModel):
    """Misclassification of a sign cutoff against a reported binary label."""

    has_subgradient = False
    param_dim = 1

    def __init__(self):
        super().__init__()
        self.kind = "mcid"

    def _build_design(self, data):
        if data.record_width != 2 or data.split_index != 1:
            raise ContractViolationError("mcid loss expects (x, y) records with split_index=1")
        x, y = data.values[:, 0], data.values[:, 1]
        _validate_labels(y)
        return x, y

    def losses_from_design(self, design, thetas):
        x, y = design
        s = np.where(x - thetas[..., 0:1] >= 0.0, 1.0, -1.0)
        return 0.5 * (1.0 - y * s)

    def risk_fn(self, design):
        x, y = design
        loss_right = 0.5 * (1.0 - y)  # loss when x >= theta (sign +1)
        loss_left = 0.5 * (1.0 + y)
        buf = np.empty_like(x)
        mask = np.empty(x.shape, dtype=bool)
        out = np.empty(x.shape[0])

        def risk(thetas):
            np.greater_equal(x, thetas[:, 0:1], out=mask)
            np.copyto(buf, loss_left)
            np.copyto(buf, loss_right, where=mask)
            return np.mean(buf, axis=-1, out=out)

        return risk

    def lstsq_seed(self, data):
        return np.array([float(np.median(data.values[:, 0]))])

    def start_scale(self, data):
        return max(float(np.std(data.values[:, 0])), 1.0)


class _BasisLoss(LossModel):
    """Shared plumbing for losses defined through theta @ f(x)."""

    def __init__(self, basis: Basis):
        super().__init__()
        self.basis = basis
        self.param_dim = basis.output_dim

    def _split_check(self, data: DataSet):
        if data.split_index is None:
            raise ContractViolationError(f"{self.kind} loss needs a covariate/response split")
        if data.split_index != self.basis.input_dim:
            raise ContractViolationError(
                f"dataset split {data.split_index} does not match basis input dim "
                f"{self.basis.input_dim}"
            )
        return self.basis.expand(data.x), data.y

    @staticmethod
    def _predict(F, thetas):
        # row-wise theta @ f(x); einsum keeps the contraction order fixed
        return np.einsum("...nj,...j->...n", F, thetas)

    @staticmethod
    def _predict_buffered(F):
        """Batched matmul into a reusable (B, n, 1) scratch buffer."""
        buf = np.empty((F.shape[0], F.shape[1], 1))

        def predict(thetas):
            np.matmul(F, thetas[:, :, None], out=buf)
            return buf[..., 0]

        return predict

    def lstsq_seed(self, data):
        F, y = self.design(data)[:2]
        coef, *_ = np.linalg.lstsq(F, y, rcond=None)
        return coef

    def start_scale(self, data):
        return max(float(np.std(data.y)), 1.0)

    def proposal_precondition(self, data):
        F = self.design(data)[0]
        q = F.shape[1]
        A = F.T @ F / F.shape[0]
        A += 1e-10 * max(float(np.trace(A)) / q, 1e-30) * np.eye(q)
        try:
            P = np.linalg.inv(A)
        except np.linalg.LinAlgError:
            return None
        P = 0.5 * (P + P.T)
        # unit mean diagonal: the scalar step-size heuristic stays meaningful
        P *= q / max(float(np.trace(P)), 1e-300)
        return P


class CheckRegressionLoss(_BasisLoss):
    """Check (pinball) loss on a linear-in-basis conditional quantile."""

    has_subgradient = True

    def __init__(self, tau: float, basis: Basis):
        super().__init__(basis)
        if not 0.0 < tau < 1.0:
            raise ContractViolationError("tau must lie in (0, 1)")
        self.tau = float(tau)
        self.kind = "check-regression"

    def _build_design(self, data):
        F, y = self._split_check(data)
        return F, y

    def losses_from_design(self, design, thetas):
        F, y = design
        u = y - self._predict(F, thetas)
        return u * (self.tau - (u < 0.0))

    def risk_fn(self, design):
        F, y = design
        predict = self._predict_buffered(F)
        a = np.empty_like(y)
        tau = self.tau
        out = np.empty(F.shape[0])

        def risk(thetas):
            u = predict(thetas)
            np.subtract(y, u, out=u)
            np.multiply(u, tau - 1.0, out=a)
            np.multiply(u, tau, out=u)
            np.maximum(u, a, out=u)
            return np.mean(u, axis=-1, out=out)

        return risk

    def subgrads(self, theta, data):
        theta = self._check_theta(theta)
        F, y = self.design(data)
        u = y - F @ theta
        scale = np.where(u <= 0.0, 1.0 - self.tau, -self.tau)
        return scale[:, None] * F


class HingeLoss(_BasisLoss):
    """Margin loss max(0, 1 - y * theta @ f(x)) for labels in {-1, +1}."""

    has_subgradient = True

    def __init__(self, basis: Basis):
        super().__init__(basis)
        self.kind = "hinge"

    def _build_design(self, data):
        F, y = self._split_check(data)
        _validate_labels(y)
        # pre-multiplied rows y_i * f(x_i): margins are one contraction away
        return np.ascontiguousarray(y[:, None] * F), y

    def losses_from_design(self, design, thetas):
        YF, _ = design
        m = self._predict(YF, thetas)
        return np.maximum(0.0, 1.0 - m)

    def risk_fn(self, design):
        YF, _ = design
        predict = self._predict_buffered(YF)
        out = np.empty(YF.shape[0])

        def risk(thetas):
            m = predict(thetas)
            np.subtract(1.0, m, out=m)
            np.maximum(m, 0.0, out=m)
            return np.mean(m, axis=-1, out=out)

        return risk

    def subgrads(self, theta, data):
        theta = self._check_theta(theta)
        YF, _ = self.design(data)
        active = 1.0 - YF @ theta >= 0.0
        return np.where(active[:, None], -YF, 0.0)


class SquaredErrorLoss(_BasisLoss):
    """Squared error on a linear-in-basis regression function."""

    has_subgradient = True

    def __init__(self, basis: Basis):
        super().__init__(basis)
        self.kind = "squared-error"

    def _build_design(self, data):
        F, y = self._split_check(data)
        return F, y

    def losses_from_design(self, design, thetas):
        F, y = design
        u = y - self._predict(F, thetas)
        return u * u

    def risk_fn(self, design):
        F, y = design
        predict = self._predict_buffered(F)
        out = np.empty(F.shape[0])

        def risk(thetas):
            u = predict(thetas)
            np.subtract(y, u, out=u)
            np.multiply(u, u, out=u)
            return np.mean(u, axis=-1, out=out)

        return risk

    def subgrads(self, theta, data):
        theta = self._check_theta(theta)
        F, y = self.design(data)
        u = y - F @ theta
        return -2.0 * u[:, None] * F


class ScaledLoss(LossModel):
    """c * base loss for c > 0; used for scale-equivariance checks."""

    def __init__(self, base: LossModel, c: float):
        super().__init__()
        if c <= 0:
            raise ContractViolationError("loss scale must be positive")
        self.base = base
        self.c = float(c)
        self.kind = f"scaled-{base.kind}"
        self.param_dim = base.param_dim
        self.has_subgradient = base.has_subgradient

    def _build_design(self, data):
        return self.base.design(data)

    def losses_from_design(self, design, thetas):
        return self.c * self.base.losses_from_design(design, thetas)

    def risk_fn(self, design):
        base_risk = self.base.risk_fn(design)
        c = self.c

        def risk(thetas):
            return c * base_risk(thetas)

        return risk

    def subgrads(self, theta, data):
        return self.c * self.base.subgrads(theta, data)

    def lstsq_seed(self, data):
        return self.base.lstsq_seed(data)

    def start_scale(self, data):
        return self.base.start_scale(data)

    def proposal_precondition(self, data):
        return self.base.proposal_precondition(data)


def _unwrap(loss: LossModel) -> LossModel:
    while isinstance(loss, ScaledLoss):
        loss = loss.base
    return loss


# ---------------------------------------------------------------------------
# operations


def eval_loss(loss: LossModel, theta, datum) -> float:
    """Loss of a single observation at theta."""
    datum = np.atleast_1d(np.asarray(datum, dtype=float))
    if not np.all(np.isfinite(datum)):
        raise DomainError("datum contains non-finite entries")
    base = _unwrap(loss)
    split = None
    if isinstance(base, (McidLoss, CheckRegressionLoss, HingeLoss, SquaredErrorLoss)):
        split = datum.shape[0] - 1
    data = DataSet(datum[None, :], split_index=split)
    return float(loss.losses(theta, data)[0])


def loss_subgradient(loss: LossModel, theta, datum) -> np.ndarray:
    """Subgradient of the loss at one observation (lower branch at kinks)."""
    datum = np.atleast_1d(np.asarray(datum, dtype=float))
    if not np.all(np.isfinite(datum)):
        raise DomainError("datum contains non-finite entries")
    base = _unwrap(loss)
    split = None
    if isinstance(base, (McidLoss, CheckRegressionLoss, HingeLoss, SquaredErrorLoss)):
        split = datum.shape[0] - 1
    data = DataSet(datum[None, :], split_index=split)
    return loss.subgrads(theta, data)[0]


def empirical_risk(loss: LossModel, theta, data: DataSet) -> float:
    """Mean loss over the dataset (pairwise summation, order-stable)."""
    if data.n < 1:
        raise DomainError("empty dataset")
    return float(loss.losses(theta, data).mean())


@dataclass
class OptimizerConfig:
    """Settings for the multi-start simplex minimizer used by erm_fit."""

    n_starts: int = 5
    xatol: float = 1e-6
    fatol: float = 1e-10
    max_iter: int | None = None
    seed: int = 0


@dataclass
class ThetaEstimate:
    theta: np.ndarray
    risk_value: float
    converged: bool
    iterations: int


def erm_fit(loss: LossModel, data: DataSet, cfg: OptimizerConfig | None = None) -> ThetaEstimate:
    """Minimize the empirical risk.

    The scalar quantile kind is solved exactly by the ceil(n*tau)-th order
    statistic.  Everything else runs a multi-start Nelder-Mead search: the
    origin, a least-squares (or median) seed, and random perturbations of the
    seed; the best final value wins.
    """
    cfg = cfg or OptimizerConfig()
    if data.n < loss.param_dim:
        raise ContractViolationError("need at least param_dim records to fit")

    base = _unwrap(loss)
    if isinstance(base, QuantileLoss):
        t = np.sort(data.values[:, 0])
        k = max(1, int(np.ceil(data.n * base.tau)))
        theta = np.array([t[k - 1]])
        return ThetaEstimate(theta, empirical_risk(loss, theta, data), True, 0)

    design = loss.design(data)

    def objective(th):
        return float(loss.risk_rows(tuple(a[None] for a in design), th[None])[0])

    seed_pt = loss.lstsq_seed(data)
    scale = loss.start_scale(data)
    rng = np.random.default_rng(cfg.seed)
    starts = [np.zeros(loss.param_dim), seed_pt]
    while len(starts) < cfg.n_starts:
        starts.append(seed_pt + scale * rng.standard_normal(loss.param_dim))

    best = None
    for s in starts:
        res = optimize.minimize(
            objective,
            s,
            method="Nelder-Mead",
            options={
                "xatol": cfg.xatol,
                "fatol": cfg.fatol,
                "maxiter": cfg.max_iter or 400 * loss.param_dim,
            },
        )
        if best is None or res.fun < best.fun:
            best = res
    theta = np.asarray(best.x, dtype=float)
    return ThetaEstimate(theta, empirical_risk(loss, theta, data), bool(best.success), int(best.nit))
