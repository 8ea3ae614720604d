"""Loss-based generalized Bayesian inference.

Build a posterior proportional to exp(-eta * n * R_n(theta)) * prior(theta)
from a loss function instead of a likelihood, sample it, summarize it with
credible regions, and calibrate the learning rate eta so those regions attain
their nominal frequentist coverage.
"""

__version__ = "0.1.0"

from .asymptotics import (
    GaussianApprox,
    HessianConfig,
    SandwichEstimate,
    bvm_approx,
    bvm_distance,
    estimate_risk_hessian,
    estimate_score_outer,
    oracle_learning_rate,
    sandwich_cov,
)
from .calibrate import (
    CalibrationResult,
    CoverageEstimate,
    GpcConfig,
    TraceStep,
    bootstrap_resample,
    calibrate_root,
    estimate_coverage_boot,
    gpc_calibrate,
)
from .gibbs import (
    DiscreteGrid,
    FlatPrior,
    GaussianPrior,
    GibbsSpec,
    PosteriorDraws,
    Prior,
    SamplerConfig,
    bissiri_objective,
    gibbs_weights_discrete,
    log_post_unnorm,
    log_prior,
    sample_gibbs,
)
from .losses import (
    Basis,
    CheckRegressionLoss,
    DataSet,
    HingeLoss,
    LossModel,
    McidLoss,
    OptimizerConfig,
    QuantileLoss,
    ScaledLoss,
    SquaredErrorLoss,
    ThetaEstimate,
    basis_eval,
    empirical_risk,
    erm_fit,
    eval_loss,
    loss_subgradient,
)
from .regions import (
    DensityLevelRegion,
    EllipticalRegion,
    Interval,
    UniformBand,
    contains,
    elliptical_region,
    hpd_density_region,
    hpd_interval,
    region_to_json,
    uniform_band,
)
from .seeding import derive_seed
from .simlab import (
    Dgp,
    StudyResult,
    bootstrap_m_region,
    consistency_diagnostic,
    coverage_vs_eta_curve,
    gamma_quantile_dgp,
    gen_dataset,
    hinge_classification_dgp,
    make_dgp,
    mcid_dgp,
    nonlinear_regression_dgp,
    quantile_regression_dgp,
    run_coverage_study,
)
