"""Learned Riemannian metrics, geodesics, and Bayesian quadrature.

The package estimates normalization constants of Riemannian normal
distributions on data manifolds: metrics learned from point clouds
(`geoquad.metrics`), exponential/logarithmic maps via IVP/BVP solvers
(`geoquad.geodesics`), warped-GP Bayesian quadrature with active sampling
(`geoquad.gp`, `geoquad.bq`), a Monte Carlo baseline
(`geoquad.mc_integrate`), and mixture-model fitting of Riemannian normal
components by manifold gradient descent (`geoquad.land`).  `geoquad.cli`
exposes data generation, fitting, and benchmark protocols; `geoquad.config`
parses the YAML run configuration those commands share.
"""

from .bq import (
    GaussianMeasure,
    IntegrationConfig,
    IntegrationProblem,
    IntegrationResult,
    ObservationSet,
    RuntimeBudget,
    SampleBudget,
    run_integration,
)
from .config import RunConfig, build_metric, load_config, parse_config
from .data_io import generate_dataset, load_points, save_points
from .errors import (
    DuplicateInputError,
    GeodesicFailure,
    GeoquadError,
    NumericalError,
    ParseError,
    SolverFailure,
    UnreliableEstimateError,
    ValidationError,
)
from .geodesics import (
    DEFAULT_SOLVER,
    GeodesicCache,
    GeodesicSolution,
    SolverConfig,
    exp_map,
    log_map,
)
from .gp import GaussianProcess, Matern52Kernel, RBFKernel
from .land import FitConfig, FitResult, Integrator, LandComponent, fit
from .mc_integrate import (
    GroundTruthPool,
    build_ground_truth_pool,
    load_pool,
    mc_subsample,
    pool_estimate,
    save_pool,
)
from .metrics import EuclideanMetric, KernelMetric, Metric, MixtureMetric

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_SOLVER",
    "DuplicateInputError",
    "EuclideanMetric",
    "FitConfig",
    "FitResult",
    "GaussianMeasure",
    "GaussianProcess",
    "GeodesicCache",
    "GeodesicFailure",
    "GeodesicSolution",
    "GeoquadError",
    "GroundTruthPool",
    "IntegrationConfig",
    "IntegrationProblem",
    "IntegrationResult",
    "Integrator",
    "KernelMetric",
    "LandComponent",
    "Matern52Kernel",
    "Metric",
    "MixtureMetric",
    "NumericalError",
    "ObservationSet",
    "ParseError",
    "RBFKernel",
    "RunConfig",
    "RuntimeBudget",
    "SampleBudget",
    "SolverConfig",
    "SolverFailure",
    "UnreliableEstimateError",
    "ValidationError",
    "build_ground_truth_pool",
    "build_metric",
    "exp_map",
    "fit",
    "generate_dataset",
    "load_config",
    "load_points",
    "load_pool",
    "log_map",
    "mc_subsample",
    "parse_config",
    "pool_estimate",
    "run_integration",
    "save_points",
    "save_pool",
    "__version__",
]
