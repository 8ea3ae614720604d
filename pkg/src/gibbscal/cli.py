"""Command-line entry points.

Subcommands: ``fit``, ``sample``, ``calibrate``, ``simulate``, ``curve``,
``diagnose``.  A JSON config file (``--config``) declares the problem; a few
flags override common fields.  Results are written as a ResultEnvelope JSON:

    {"config": <resolved config echo>,
     "payload": <command-specific result>,
     "payload_sha256": <hash of the canonical payload bytes>,
     "seed": <root seed>, "versions": {...}, "timing": {"seconds": ...}}

The payload section (and any CSV side tables) is byte-identical across runs
with the same config and seed at any worker count; only "timing" varies.
Progress lines go to standard error as JSON objects.

Exit codes: 0 success, 2 usage, 3 data/config error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .asymptotics import bvm_approx, bvm_distance, estimate_risk_hessian
from .calibrate import GpcConfig, gpc_calibrate
from .dataio import canon_json, load_dataset_csv, write_csv
from .errors import (
    ContractViolationError,
    DegeneratePosteriorError,
    DomainError,
    InitializationError,
    IntegrabilityError,
    SingularHessianError,
    UnsupportedOperationError,
)
from .gibbs import FlatPrior, GaussianPrior, GibbsSpec, SamplerConfig, sample_gibbs
from .losses import (
    Basis,
    CheckRegressionLoss,
    DataSet,
    HingeLoss,
    McidLoss,
    QuantileLoss,
    SquaredErrorLoss,
    erm_fit,
)
from .simlab import (
    consistency_diagnostic,
    coverage_vs_eta_curve,
    gen_dataset,
    make_dgp,
    run_coverage_study,
)

COMMANDS = ("fit", "sample", "calibrate", "simulate", "curve", "diagnose")

_CONFIG_KEYS = {
    "command", "seed", "workers", "out", "dgp", "dataset", "loss", "prior",
    "eta", "n", "reps", "alpha", "calibrate", "eta_grid", "n_list", "eps",
    "diagnostic", "sampler", "gpc",
}
_DGP_KEYS = {"kind", "tau"}
_DATASET_KEYS = {"path", "split_index", "header"}
_LOSS_KEYS = {"kind", "tau", "basis"}
_BASIS_KEYS = {"kind", "degree", "input_dim"}
_PRIOR_KEYS = {"kind", "mean", "sd"}
_SAMPLER_KEYS = {"n_draws", "burn_in", "thin", "init", "target_accept", "adapt_window"}
_GPC_KEYS = {
    "alpha", "B", "eta0", "kappa0", "gamma_exp", "max_iter", "tol",
    "eta_min", "eta_max", "region_kind", "feature", "band_grid", "sampler",
}


class ConfigError(ValueError):
    pass


def _check_keys(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


@dataclass
class RunConfig:
    """Validated run description; ``to_dict`` is its canonical echo form."""

    command: str
    raw: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    out: str | None = None

    def to_dict(self) -> dict:
        d = dict(self.raw)
        d["command"] = self.command
        d["seed"] = self.seed
        d["workers"] = self.workers
        if self.out is not None:
            d["out"] = self.out
        return d


def parse_config(path: str | None, command: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Load and validate a config file, then apply flag overrides."""
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, _CONFIG_KEYS, "config")
    for key, keys in (
        ("dgp", _DGP_KEYS), ("dataset", _DATASET_KEYS), ("loss", _LOSS_KEYS),
        ("prior", _PRIOR_KEYS), ("sampler", _SAMPLER_KEYS), ("gpc", _GPC_KEYS),
    ):
        if key in raw:
            if not isinstance(raw[key], dict):
                raise ConfigError(f"config section {key!r} must be an object")
            _check_keys(raw[key], keys, key)
            if key == "loss" and "basis" in raw[key]:
                _check_keys(raw[key]["basis"], _BASIS_KEYS, "loss.basis")
            if key == "gpc" and "sampler" in raw[key]:
                _check_keys(raw[key]["sampler"], _SAMPLER_KEYS, "gpc.sampler")

    cmd = raw.get("command", command)
    if command is not None and "command" in raw and raw["command"] != command:
        raise ConfigError(
            f"config names command {raw['command']!r} but {command!r} was invoked"
        )
    if cmd not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}, got {cmd!r}")
    if ("dgp" in raw) == ("dataset" in raw):
        raise ConfigError("exactly one of 'dgp' and 'dataset' is required")

    overrides = overrides or {}
    for flag, value in overrides.items():
        if value is None:
            continue
        if flag in ("seed", "workers", "out"):
            raw[flag] = value
        elif flag in ("eta", "n", "reps"):
            raw[flag] = value
        elif flag == "alpha":
            raw.setdefault("gpc", {})["alpha"] = value
            raw["alpha"] = value
        elif flag == "B":
            raw.setdefault("gpc", {})["B"] = value
        elif flag == "tau":
            if "dgp" in raw:
                raw["dgp"]["tau"] = value
            if "loss" in raw:
                raw["loss"]["tau"] = value

    cfg = RunConfig(command=cmd, raw={k: v for k, v in raw.items() if k not in ("command",)})
    cfg.seed = int(raw.get("seed", 0))
    cfg.workers = int(raw.get("workers", os.environ.get("GIBBSCAL_WORKERS", 1)))
    cfg.out = raw.get("out")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    cfg.raw.pop("seed", None)
    cfg.raw.pop("workers", None)
    cfg.raw.pop("out", None)
    return cfg


# ---------------------------------------------------------------------------
# builders


def _build_basis(d: dict | None) -> Basis:
    d = d or {"kind": "affine", "input_dim": 1}
    return Basis(
        kind=d.get("kind", "affine"),
        degree=d.get("degree"),
        input_dim=int(d.get("input_dim", 1)),
    )


def _build_loss(d: dict):
    kind = d.get("kind")
    if kind == "quantile":
        return QuantileLoss(float(d.get("tau", 0.5)))
    if kind == "mcid":
        return McidLoss()
    if kind == "check-regression":
        return CheckRegressionLoss(float(d.get("tau", 0.5)), _build_basis(d.get("basis")))
    if kind == "hinge":
        return HingeLoss(_build_basis(d.get("basis")))
    if kind == "squared-error":
        return SquaredErrorLoss(_build_basis(d.get("basis")))
    raise ConfigError(f"unknown loss kind {kind!r}")


def _build_prior(d: dict | None):
    if d is None or d.get("kind", "flat") == "flat":
        return FlatPrior()
    if d["kind"] == "gaussian":
        return GaussianPrior(d["mean"], d["sd"])
    raise ConfigError(f"unknown prior kind {d.get('kind')!r}")


def _build_sampler(d: dict | None) -> SamplerConfig:
    d = d or {}
    kwargs = {k: d[k] for k in d if k in _SAMPLER_KEYS}
    return SamplerConfig(**kwargs)


def _build_gpc(d: dict | None, alpha=None) -> GpcConfig:
    d = dict(d or {})
    sampler = _build_sampler(d.pop("sampler", None))
    eta_min = d.pop("eta_min", 1e-4)
    eta_max = d.pop("eta_max", 1e4)
    band_grid = d.pop("band_grid", None)
    if band_grid is not None:
        band_grid = np.asarray(band_grid, dtype=float)
    if alpha is not None:
        d["alpha"] = alpha
    return GpcConfig(
        sampler=sampler, eta_bounds=(eta_min, eta_max), band_grid=band_grid, **d
    )


def _problem(cfg: RunConfig):
    """Resolve (dgp-or-None, data-or-None, loss, prior) from the config."""
    raw = cfg.raw
    if "dgp" in raw:
        kwargs = {k: v for k, v in raw["dgp"].items() if k != "kind" and v is not None}
        dgp = make_dgp(raw["dgp"]["kind"], **kwargs)
        loss = dgp.loss
        prior = _build_prior(raw.get("prior")) if "prior" in raw else dgp.prior
        data = None
        return dgp, data, loss, prior
    ds = raw["dataset"]
    data = load_dataset_csv(
        ds["path"], split_index=ds.get("split_index"), header=bool(ds.get("header", False))
    )
    if "loss" not in raw:
        raise ConfigError("dataset runs must declare a loss")
    loss = _build_loss(raw["loss"])
    loss.design(data)  # validates dimensions and classification labels now
    prior = _build_prior(raw.get("prior"))
    return None, data, loss, prior


def _materialize(cfg: RunConfig, dgp, data):
    if data is not None:
        return data
    n = int(cfg.raw.get("n", 100))
    from .seeding import derive_seed

    return gen_dataset(dgp, n, derive_seed(cfg.seed, ("data", 0)))


# ---------------------------------------------------------------------------
# command implementations


def _progress(obj: dict):
    print(json.dumps(obj, sort_keys=True), file=sys.stderr, flush=True)


def _cmd_fit(cfg: RunConfig):
    dgp, data, loss, prior = _problem(cfg)
    data = _materialize(cfg, dgp, data)
    est = erm_fit(loss, data)
    payload = {
        "kind": "fit",
        "theta": est.theta.tolist(),
        "risk": est.risk_value,
        "converged": est.converged,
        "iterations": est.iterations,
        "n": data.n,
    }
    return payload, []


def _cmd_sample(cfg: RunConfig):
    from .seeding import derive_seed

    dgp, data, loss, prior = _problem(cfg)
    data = _materialize(cfg, dgp, data)
    eta = float(cfg.raw.get("eta", 1.0))
    sampler = _build_sampler(cfg.raw.get("sampler"))
    spec = GibbsSpec(loss, prior, eta, data)
    draws = sample_gibbs(spec, sampler, derive_seed(cfg.seed, ("chain", 0)))
    qs = [0.025, 0.25, 0.5, 0.75, 0.975]
    payload = {
        "kind": "sample",
        "eta": eta,
        "n": data.n,
        "n_draws": int(draws.draws.shape[0]),
        "accept_rate": draws.accept_rate,
        "mean": draws.draws.mean(axis=0).tolist(),
        "sd": draws.draws.std(axis=0, ddof=1).tolist(),
        "quantiles": {str(p): np.quantile(draws.draws, p, axis=0).tolist() for p in qs},
    }
    q = draws.draws.shape[1]
    side = [(
        "draws",
        [f"theta{j}" for j in range(q)] + ["log_post"],
        [list(row) + [lp] for row, lp in zip(draws.draws.tolist(), draws.log_post.tolist())],
    )]
    return payload, side


def _cmd_calibrate(cfg: RunConfig):
    from .seeding import derive_seed

    dgp, data, loss, prior = _problem(cfg)
    data = _materialize(cfg, dgp, data)
    gpc = _build_gpc(cfg.raw.get("gpc"), alpha=cfg.raw.get("alpha"))

    def progress(step):
        _progress(
            {"s": step.s, "eta": step.eta_before, "c_hat": step.c_hat,
             "eta_next": step.eta_after}
        )

    res = gpc_calibrate(
        data, loss, prior, gpc, derive_seed(cfg.seed, ("gpc", 0)),
        workers=cfg.workers, progress=progress,
    )
    payload = {
        "kind": "calibrate",
        "eta_hat": res.eta_hat,
        "terminated_by": res.terminated_by,
        "total_posterior_samples_run": res.total_posterior_samples_run,
        "trace": [
            {"s": t.s, "eta_before": t.eta_before, "c_hat": t.c_hat, "kappa": t.kappa,
             "eta_after_raw": t.eta_after_raw, "eta_after": t.eta_after}
            for t in res.trace
        ],
    }
    return payload, []


def _cmd_simulate(cfg: RunConfig):
    dgp, data, loss, prior = _problem(cfg)
    if dgp is None:
        raise ConfigError("simulate needs a dgp section")
    gpc = _build_gpc(cfg.raw.get("gpc"), alpha=cfg.raw.get("alpha"))
    reps = int(cfg.raw.get("reps", 100))
    n = int(cfg.raw.get("n", 50))
    calibrate = bool(cfg.raw.get("calibrate", True))
    eta = cfg.raw.get("eta")
    res = run_coverage_study(
        dgp, n, gpc, reps, cfg.seed, calibrate=calibrate,
        eta=None if eta is None else float(eta), workers=cfg.workers,
    )
    payload = {
        "kind": "simulate",
        "reps": res.reps,
        "failed": res.failed,
        "coverage": res.coverage,
        "mean_eta_hat": res.mean_eta_hat,
        "sd_eta_hat": res.sd_eta_hat,
    }
    cov_keys = sorted(res.coverage)
    header = ["rep", "seed", "failed", "eta_hat"] + [f"covered_{k}" for k in cov_keys]
    rows = []
    for rec in res.per_rep:
        row = [rec["rep"], rec["seed"], int(rec["failed"]), rec.get("eta_hat", "")]
        for k in cov_keys:
            c = rec.get("covered", {}).get(k)
            row.append("" if c is None else int(c))
        rows.append(row)
    return payload, [("records", header, rows)]


def _cmd_curve(cfg: RunConfig):
    dgp, data, loss, prior = _problem(cfg)
    if dgp is None:
        raise ConfigError("curve needs a dgp section")
    gpc = _build_gpc(cfg.raw.get("gpc"), alpha=cfg.raw.get("alpha"))
    rows = coverage_vs_eta_curve(
        dgp,
        [int(v) for v in cfg.raw.get("n_list", [50])],
        [float(v) for v in cfg.raw.get("eta_grid", [1.0])],
        int(cfg.raw.get("reps", 50)),
        cfg.seed,
        cfg=gpc,
        workers=cfg.workers,
    )
    payload = {"kind": "curve", "rows": rows}
    side = [(
        "cells",
        ["n", "eta", "coverage", "reps", "failed"],
        [[r["n"], r["eta"], r["coverage"], r["reps"], r["failed"]] for r in rows],
    )]
    return payload, side


def _cmd_diagnose(cfg: RunConfig):
    from .seeding import derive_seed

    dgp, data, loss, prior = _problem(cfg)
    what = cfg.raw.get("diagnostic", "consistency")
    if what == "consistency":
        if dgp is None:
            raise ConfigError("consistency diagnostic needs a dgp section")
        rows = consistency_diagnostic(
            dgp,
            [int(v) for v in cfg.raw.get("n_list", [50, 200])],
            float(cfg.raw.get("eps", 0.5)),
            float(cfg.raw.get("eta", 1.0)),
            int(cfg.raw.get("reps", 10)),
            cfg.seed,
            sampler=_build_sampler(cfg.raw.get("sampler")),
        )
        payload = {"kind": "diagnose", "what": "consistency", "rows": rows}
        side = [(
            "table", ["n", "prob_outside"], [[r["n"], r["prob_outside"]] for r in rows]
        )]
        return payload, side
    if what == "bvm":
        data = _materialize(cfg, dgp, data)
        eta = float(cfg.raw.get("eta", 1.0))
        sampler = _build_sampler(cfg.raw.get("sampler"))
        est = erm_fit(loss, data)
        V = estimate_risk_hessian(loss, data, est.theta)
        approx = bvm_approx(eta, est.theta, est.theta, V, data.n)
        spec = GibbsSpec(loss, prior, eta, data)
        draws = sample_gibbs(spec, sampler, derive_seed(cfg.seed, ("chain", 0)))
        ks = bvm_distance(draws, approx)
        payload = {
            "kind": "diagnose", "what": "bvm", "ks": ks, "eta": eta, "n": data.n,
            "theta_hat": est.theta.tolist(), "V": V.tolist(),
        }
        return payload, []
    raise ConfigError(f"unknown diagnostic {what!r}")


_IMPL = {
    "fit": _cmd_fit,
    "sample": _cmd_sample,
    "calibrate": _cmd_calibrate,
    "simulate": _cmd_simulate,
    "curve": _cmd_curve,
    "diagnose": _cmd_diagnose,
}


# ---------------------------------------------------------------------------
# dispatch


def _side_path(out: str, name: str) -> str:
    root, ext = os.path.splitext(out)
    return f"{root}.{name}.csv"


def cli_dispatch(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="gibbscal",
        description="Loss-based generalized Bayesian inference with calibrated learning rates",
    )
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--eta", type=float, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--B", type=int, default=None)
        p.add_argument("--n", type=int, default=None)
        p.add_argument("--reps", type=int, default=None)
        p.add_argument("--tau", type=float, default=None)

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0,) else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    t0 = time.perf_counter()
    try:
        cfg = parse_config(
            args.config,
            command=args.command,
            overrides={
                "seed": args.seed, "workers": args.workers, "out": args.out,
                "eta": args.eta, "alpha": args.alpha, "B": args.B,
                "n": args.n, "reps": args.reps, "tau": args.tau,
            },
        )
        payload, side_tables = _IMPL[cfg.command](cfg)
    except (ConfigError, ContractViolationError, DomainError, IntegrabilityError,
            UnsupportedOperationError, FileNotFoundError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (SingularHessianError, DegeneratePosteriorError, InitializationError,
            np.linalg.LinAlgError, FloatingPointError, OverflowError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    elapsed = time.perf_counter() - t0

    payload_bytes = canon_json(payload).encode("utf-8")
    envelope = {
        "config": cfg.to_dict(),
        "payload": payload,
        "payload_sha256": hashlib.sha256(payload_bytes).hexdigest(),
        "seed": cfg.seed,
        "versions": {
            "gibbscal": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        "timing": {"seconds": elapsed},
    }
    text = canon_json(envelope)
    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        for name, header, rows in side_tables:
            write_csv(_side_path(cfg.out, name), header, rows)
    else:
        print(text)
    return 0


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
