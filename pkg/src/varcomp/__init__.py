"""Variance components estimation by minorization-maximization."""

from .acceleration import SecantState, accelerate
from .alternatives import (
    RateDiagnostics,
    em_step_sigma2,
    fisher_information_sigma2,
    fs_step_sigma2,
    hybrid_step_sigma2,
    rate_diagnostics,
)
from .estimators import (
    LassoVarianceComponentsPath,
    MultivariateVarianceComponents,
    VarianceComponentsRegressor,
)
from .exceptions import *  # noqa: F401,F403
from .linalg import (
    CongruencePair,
    cholesky,
    congruence_decomp,
    hadamard_trace,
    nullspace_basis,
    psd_rank,
    riccati_solve,
    sym_sqrt,
)
from .mm import FitResult, SolverConfig, fit, fit_reml, fit_two_vc, mm_step_sigma2
from .model import (
    FitTrace,
    OmegaFactor,
    Parameters,
    VarCompProblem,
    assemble_omega,
    gls_beta,
    kkt_residual,
    log_likelihood,
    score_sigma2,
)
from .multivariate import (
    MultiVarCompProblem,
    MvtParameters,
    fit_mvt,
    fit_mvt_two_vc,
    gamma_coefficient_matrix,
    mvt_log_likelihood,
    mvt_mm_step,
)
from .path import default_grid, entry_ranking, lambda_max, solution_path
from .penalized import (
    PenaltySpec,
    lasso_step_sigma,
    map_step_gamma_iw,
    map_step_sigma2,
    ridge_step_sigma2,
)

__version__ = "0.1.0"
