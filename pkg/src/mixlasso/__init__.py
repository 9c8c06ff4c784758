"""l1-penalized maximum likelihood for linear mixed-effects models.

Fits high-dimensional mixed models with a lasso or adaptive lasso
penalty on the fixed effects by block coordinate gradient descent,
selects the penalty level by BIC along a regularization path, recovers
group-level random effects, and ships a simulation benchmark harness
plus a command line interface.
"""

from .exceptions import (
    DimensionMismatch,
    EmptyCandidateSet,
    InfeasibleFrozenCoefficient,
    MixLassoError,
    NonDescentDirection,
    NoPenalizedCoefficients,
    NotPositiveDefinite,
)
from .linalg import CholeskyFactor, cholesky, log_det, solve_spd
from .model import (
    CovarianceStructure,
    Group,
    GroupedDataset,
    ParameterVector,
    PenaltyWeights,
    fisher_diagonal,
    gradient_beta,
    gradient_eta,
    group_covariance,
    marginal_cov_derivative,
    neg_log_likelihood,
    objective,
    penalty_value,
)
from .optimizer import (
    FitResult,
    SolverOptions,
    analytic_beta_update,
    armijo_step,
    cgd_cycle,
    descent_direction,
    fit,
)
from .predict import (
    RandomEffectPrediction,
    ResponsePrediction,
    predict_random_effects,
    predict_response,
)
from .selection import (
    PathEntry,
    PathResult,
    StructureSelection,
    adaptive_weights,
    bic,
    default_start,
    initial_lasso,
    lambda_max,
    lambda_path,
    lasso_path_bic,
    select_random_effects,
    strip_random_effects,
    with_random_effects,
)
from .simulate import (
    METHODS,
    RunMetrics,
    SchemeSummary,
    SimScheme,
    SimTruth,
    evaluate_fit,
    excess_risk,
    generate_design,
    make_scheme,
    run_scheme,
    scheme_from_dict,
    scheme_to_dict,
    simulate_dataset,
    simulate_test_data,
    truth_parameters,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
