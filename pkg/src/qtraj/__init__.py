"""Discrete-time quantum trajectories: simulation, assumption checks and limit-theorem diagnostics."""

__version__ = "0.1.0"

from .assumptions import (
    AssumptionReport,
    check_assumptions,
    check_erg,
    check_pur,
    compute_rho_inv,
    estimate_period,
)
from .engine import (
    TrajectoryConfig,
    TrajectoryPath,
    evolved_estimator,
    mle_initial_estimator,
    sample_replicas,
    sample_trajectory,
    word_probability,
)
from .errors import (
    DegenerateVariance,
    DimensionMismatch,
    InsufficientPoints,
    NoConvergence,
    NonUniqueFixedPoint,
    PreconditionError,
    QTrajError,
    SizeLimit,
    ZeroBranch,
)
from .kernel import (
    PoissonSolution,
    VarianceEstimate,
    apply_Pi,
    estimate_gamma_sq,
    iterate_Pi,
    martingale_path,
    solve_poisson,
    variance_h,
)
from .measures import DiscreteMeasure, cesaro_pushforward, empirical_measure, fit_lambda, wasserstein1
from .model import (
    DensityMatrix,
    KrausFamily,
    ProjectiveState,
    apply_kraus,
    channel_apply,
    metric_distance,
    projector_of,
    validate_stochasticity,
    word_product,
)
from .observables import Observable, parse_observable, population
from .reference import (
    KeepSwitchModel,
    build_keep_switch,
    keep_switch_oracles,
    negative_controls,
    random_valid_family,
)
from .stats import clt_test, fclt_covariance, lil_scan, lln_check, mdp_cumulant, rate_function
