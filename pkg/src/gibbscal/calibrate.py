"""Learning-rate calibration by bootstrap coverage and stochastic approximation.

The coverage of a credible region at learning rate eta is estimated by the
bootstrap: resample the data B times, sample the posterior built on each
resample at rate eta, build the configured region, and count how often it
contains the empirical risk minimizer of the original data.  A Robbins-Monro
recursion

    eta_s = eta_{s-1} + kappa_s * (c_hat(eta_{s-1}) - (1 - alpha)),
    kappa_s = kappa0 * (1 + s)^(-gamma_exp),

then walks eta toward the rate at which estimated coverage matches the
nominal level.  Coverage is a decreasing function of eta (larger eta means a
tighter posterior), so the update moves eta up when the regions over-cover
and down when they under-cover.

Bootstrap replicates are pinned to seeds derived from (seed, "boot", b) with
no iteration index, so the same B resamples are re-evaluated at every eta
(common random numbers).  Replicates are stepped in fixed-size vectorized
blocks; a worker pool distributes whole blocks, which leaves every number
bitwise independent of the worker count.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolationError, DegeneratePosteriorError
from .gibbs import (
    FlatPrior,
    GibbsSpec,
    PosteriorDraws,
    Prior,
    SamplerConfig,
    _check_flat_ok,
    _sample_batch,
)
from .losses import DataSet, LossModel, erm_fit
from .regions import (
    contains,
    elliptical_region,
    hpd_density_region,
    hpd_interval,
    order_stat_quantile,
    uniform_band,
)
from .seeding import derive_seed

__all__ = [
    "GpcConfig",
    "CoverageEstimate",
    "TraceStep",
    "CalibrationResult",
    "bootstrap_resample",
    "estimate_coverage_boot",
    "gpc_calibrate",
    "calibrate_root",
]

_BLOCK = 64  # replicates stepped together; fixed so results ignore worker count

_REGION_KINDS = ("interval", "elliptical", "hpd", "band")


@dataclass
class GpcConfig:
    """Calibration settings.

    ``region_kind`` picks the credible-region constructor whose coverage is
    matched: a marginal HPD interval for one coordinate ("interval", with
    ``feature`` selecting the coordinate), a joint ellipse ("elliptical"), a
    density level set ("hpd"), or a sup-norm curve band ("band", with
    ``band_grid`` the evaluation grid).
    """

    alpha: float = 0.05
    B: int = 300
    eta0: float = 1.0
    kappa0: float = 1.0
    gamma_exp: float = 0.75
    max_iter: int = 15
    tol: float = 0.01
    eta_bounds: tuple = (1e-4, 1e4)
    region_kind: str = "elliptical"
    feature: int | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    band_grid: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ContractViolationError("alpha must lie in (0, 1)")
        if self.B < 1 or self.max_iter < 1:
            raise ContractViolationError("B and max_iter must be positive")
        if not 0.5 < self.gamma_exp <= 1.0:
            raise ContractViolationError("gamma_exp must lie in (0.5, 1]")
        lo, hi = self.eta_bounds
        if not (0 < lo < self.eta0 < hi):
            raise ContractViolationError("need eta_min < eta0 < eta_max, all positive")
        if self.region_kind not in _REGION_KINDS:
            raise ContractViolationError(f"region_kind must be one of {_REGION_KINDS}")
        if self.region_kind == "band" and self.band_grid is None:
            raise ContractViolationError("band region needs band_grid")


@dataclass
class CoverageEstimate:
    eta: float
    c_hat: float
    B: int
    seed: int


@dataclass
class TraceStep:
    """One Robbins-Monro update; eta_after_raw is the pre-clamp value."""

    s: int
    eta_before: float
    c_hat: float
    kappa: float
    eta_after_raw: float
    eta_after: float


@dataclass
class CalibrationResult:
    eta_hat: float
    trace: list
    terminated_by: str
    total_posterior_samples_run: int = 0


def bootstrap_resample(data: DataSet, seed: int) -> DataSet:
    """n records drawn uniformly with replacement; deterministic in seed."""
    rng = np.random.default_rng(seed & ((1 << 64) - 1))
    idx = rng.integers(0, data.n, size=data.n)
    return DataSet(data.values[idx], split_index=data.split_index)


# ---------------------------------------------------------------------------
# bootstrap session


def _region_covers(cfg: GpcConfig, loss, prior, eta, dataset, draws: PosteriorDraws, target):
    """Build the configured region from one replicate's draws and test the target."""
    alpha = cfg.alpha
    if cfg.region_kind == "interval":
        j = cfg.feature if cfg.feature is not None else 0
        region = hpd_interval(draws.draws[:, j], alpha)
        return contains(region, target[j])
    if cfg.region_kind == "elliptical":
        region = elliptical_region(draws, alpha)
        return contains(region, target)
    if cfg.region_kind == "hpd":
        log_cut = order_stat_quantile(draws.log_post, alpha)
        spec = GibbsSpec(loss, prior, eta, dataset)
        return bool(spec.log_post(target) >= log_cut)
    # band: compare curves on the configured grid
    basis = loss.basis
    G = basis.expand(np.asarray(cfg.band_grid, dtype=float)[:, None])
    curves = draws.draws @ G.T
    region = uniform_band(curves, alpha, grid=cfg.band_grid)
    return contains(region, G @ target)


def _coverage_block(args):
    """Sample one block of replicates at eta and return containment flags."""
    (loss, prior, datasets, eta, sampler_cfg, seeds, inits, target, cfg) = args
    flags = []
    if not datasets:
        return flags
    draws, lps, _ = _sample_batch(
        loss, prior, datasets, np.full(len(datasets), eta), sampler_cfg, seeds, inits
    )
    for i, ds in enumerate(datasets):
        pd = PosteriorDraws(draws[i], lps[i], 0.0, int(seeds[i]))
        try:
            flags.append(bool(_region_covers(cfg, loss, prior, eta, ds, pd, target)))
        except DegeneratePosteriorError:
            warnings.warn("degenerate replicate posterior counted as non-covering")
            flags.append(False)
    return flags


class _GpcSession:
    """Fixed bootstrap replicates reused across every eta evaluation."""

    def __init__(self, data: DataSet, loss: LossModel, prior: Prior, cfg: GpcConfig, seed: int):
        self.loss = loss
        self.prior = prior
        self.cfg = cfg
        self.seed = int(seed)
        self.theta_hat = erm_fit(loss, data).theta
        self.samples_run = 0

        self.datasets = []
        self.inits = []
        self.chain_seeds = []
        self.dead = np.zeros(cfg.B, dtype=bool)
        flat = isinstance(prior, FlatPrior)
        for b in range(cfg.B):
            ok = False
            for retry in (0, 1):
                path = [("boot", b)] + ([("retry", 1)] if retry else [])
                ds = bootstrap_resample(data, derive_seed(self.seed, *path))
                try:
                    if flat:
                        _check_flat_ok(loss, ds)
                    init = erm_fit(loss, ds).theta
                    risk0 = float(loss.losses(init, ds).mean())
                    if not np.isfinite(risk0):
                        raise ValueError("non-finite risk at replicate init")
                except Exception as e:  # degenerate resample; retry then give up
                    if retry:
                        warnings.warn(
                            f"bootstrap replicate {b} failed twice ({e}); counted as non-covering"
                        )
                    continue
                ok = True
                break
            if ok:
                self.datasets.append(ds)
                self.inits.append(init)
                self.chain_seeds.append(derive_seed(self.seed, *path, ("chain", 0)))
            else:
                self.datasets.append(None)
                self.inits.append(None)
                self.chain_seeds.append(0)
                self.dead[b] = True

        live = [b for b in range(cfg.B) if not self.dead[b]]
        self.blocks = [live[i : i + _BLOCK] for i in range(0, len(live), _BLOCK)]

    def _block_args(self, block, eta):
        return (
            self.loss,
            self.prior,
            [self.datasets[b] for b in block],
            float(eta),
            self.cfg.sampler,
            [self.chain_seeds[b] for b in block],
            np.array([self.inits[b] for b in block]),
            self.theta_hat,
            self.cfg,
        )

    def coverage(self, eta: float, workers: int = 1) -> CoverageEstimate:
        flags = np.zeros(self.cfg.B, dtype=bool)
        if workers > 1 and len(self.blocks) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_coverage_block, [self._block_args(b, eta) for b in self.blocks]))
        else:
            results = [_coverage_block(self._block_args(b, eta)) for b in self.blocks]
        for block, res in zip(self.blocks, results):
            for b, f in zip(block, res):
                flags[b] = f
        self.samples_run += sum(len(b) for b in self.blocks) * self.cfg.sampler.n_draws
        return CoverageEstimate(float(eta), float(flags.mean()), self.cfg.B, self.seed)


def estimate_coverage_boot(
    eta: float,
    data: DataSet,
    loss: LossModel,
    prior: Prior,
    cfg: GpcConfig,
    seed: int,
    workers: int = 1,
) -> CoverageEstimate:
    """Bootstrap estimate of the coverage probability at one eta."""
    return _GpcSession(data, loss, prior, cfg, seed).coverage(eta, workers)


# ---------------------------------------------------------------------------
# stochastic approximation


def calibrate_root(coverage_fn, cfg: GpcConfig, progress=None) -> CalibrationResult:
    """Robbins-Monro recursion on an arbitrary coverage evaluator.

    ``coverage_fn(eta)`` returns estimated coverage in [0, 1] (a float or a
    CoverageEstimate).  Stops when the clamped step falls below ``cfg.tol``
    or after ``cfg.max_iter`` iterations.  ``progress``, if given, receives
    each TraceStep as it is produced.
    """
    eta = float(cfg.eta0)
    lo, hi = cfg.eta_bounds
    trace: list[TraceStep] = []
    terminated = "max_iter"
    for s in range(1, cfg.max_iter + 1):
        est = coverage_fn(eta)
        c = est.c_hat if isinstance(est, CoverageEstimate) else float(est)
        kappa = cfg.kappa0 * (1.0 + s) ** (-cfg.gamma_exp)
        raw = eta + kappa * (c - (1.0 - cfg.alpha))
        new = min(max(raw, lo), hi)
        step = TraceStep(s, eta, c, kappa, raw, new)
        trace.append(step)
        if progress is not None:
            progress(step)
        moved = abs(new - eta)
        eta = new
        if moved < cfg.tol:
            terminated = "tolerance"
            break
    return CalibrationResult(eta, trace, terminated)


def gpc_calibrate(
    data: DataSet,
    loss: LossModel,
    prior: Prior,
    cfg: GpcConfig,
    seed: int,
    workers: int = 1,
    progress=None,
) -> CalibrationResult:
    """Calibrate the learning rate on one dataset.

    ``progress``, if given, is called with each TraceStep as it is produced.
    """
    session = _GpcSession(data, loss, prior, cfg, seed)

    def coverage_fn(eta):
        return session.coverage(eta, workers)

    result = calibrate_root(coverage_fn, cfg, progress=progress)
    result.total_posterior_samples_run = session.samples_run
    return result
