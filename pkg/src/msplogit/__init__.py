"""Mixed-effects logistic regression by maximum (softly penalized) likelihood.

Fits clustered binary-response models with Gaussian random effects,
approximating the marginal likelihood by adaptive Gauss-Hermite
quadrature (scalar random effects) or the Laplace approximation (any
dimension).  Besides plain maximum likelihood, a softly scaled
composite penalty (Jeffreys prior on the fixed effects, negative Huber
losses on the log-Cholesky variance parameters) guarantees estimates in
the interior of the parameter space while preserving the first-order
behavior of the ML estimator, including equivariance under contrasts.
"""

from .model import (
    Cluster,
    ClusteredDataset,
    DataError,
    Theta,
    conditional_loglik,
    psi_to_sigma,
    sigma_to_psi,
)
from .likelihood import (
    ClusterMode,
    LoglikEvaluator,
    ModeFindingError,
    QuadratureRule,
    agq_loglik,
    cluster_mode,
    gauss_hermite_rule,
    laplace_loglik,
)
from .penalties import (
    PenaltyValue,
    SingularInformationError,
    composite_penalty,
    huber_D,
    jeffreys_penalty,
    scale_factor,
    variance_penalty,
)
from .optimize import (
    FitError,
    FitOptions,
    FitResult,
    GradientError,
    fit,
    numeric_gradient,
    objective,
)
from .inference import (
    ContrastMap,
    WaldSE,
    attach_se,
    transform_dataset,
    transform_fit,
    wald_ci,
    wald_se,
)
from .simulate import (
    SimulationDesign,
    SimulationSummary,
    percentile_table,
    run_study,
    simulate_responses,
)

__version__ = "0.1.0"

__all__ = [
    "Cluster",
    "ClusteredDataset",
    "DataError",
    "Theta",
    "conditional_loglik",
    "psi_to_sigma",
    "sigma_to_psi",
    "ClusterMode",
    "LoglikEvaluator",
    "ModeFindingError",
    "QuadratureRule",
    "agq_loglik",
    "cluster_mode",
    "gauss_hermite_rule",
    "laplace_loglik",
    "PenaltyValue",
    "SingularInformationError",
    "composite_penalty",
    "huber_D",
    "jeffreys_penalty",
    "scale_factor",
    "variance_penalty",
    "FitError",
    "FitOptions",
    "FitResult",
    "GradientError",
    "fit",
    "numeric_gradient",
    "objective",
    "ContrastMap",
    "WaldSE",
    "attach_se",
    "transform_dataset",
    "transform_fit",
    "wald_ci",
    "wald_se",
    "SimulationDesign",
    "SimulationSummary",
    "percentile_table",
    "run_study",
    "simulate_responses",
    "__version__",
]
