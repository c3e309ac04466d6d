"""Exponential-family regression robust to mismatch error in linked files."""

from .baselines import (
    EstimatingEquationFit,
    ExchangeOperator,
    chambers_equation,
    fit_chambers,
    fit_ll,
    ll_equation,
)
from .blocks import BlockPartition
from .estimators import (
    FitError,
    FitOptions,
    MergedDataset,
    PenalizedFit,
    RankDeficiencyError,
    beta_update,
    fit_glm,
    fit_penalized,
    fit_penalized_constrained,
    gradient,
    lambda_max,
    objective,
    xi_update,
)
from .families import DomainError, Family, Kind, Link
from .matching import (
    MismatchReport,
    PermutationEstimate,
    Threshold,
    TopK,
    correspondence_l2,
    detect_mismatches,
    hamming_distance,
    recover_permutation,
    two_stage_correct,
)
from .simlab import (
    DesignKind,
    MethodResult,
    PermutationKind,
    ReplicationResult,
    SimulationScenario,
    deviance_between_means,
    generate_beta,
    generate_design,
    generate_permutation_blocks,
    generate_permutation_ksparse,
    lambda_grid,
    response_sd_data,
    response_sd_known,
    run_replications,
)

__version__ = "0.1.0"
