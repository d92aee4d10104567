"""Conditional density estimation with exponential-family tilting trees."""

from .basis import (
    IdentityBasis,
    PenaltyMatrix,
    RawSplineBasis,
    SplineBasis,
    build_basis,
    build_raw_basis,
    compute_penalty_matrix,
    diagonalize,
)
from .binfit import (
    BinGrid,
    BinnedSample,
    CarryingDensity,
    LindseyFit,
    degrees_of_freedom,
    density_at,
    discretize,
    fit_poisson,
    lambda_for_df,
)
from .boost import BoostConfig, BoostModel, fit, load_model, save_model
from .errors import ConvergenceError, NumericError
from .metrics import EvalReport, evaluate_model, goodness_of_fit, loglik, quantile_loss
from .pretreat import CenteringModel, MeanConfig, TransformRecord, fit_mean, select_boxcox
from .simdata import SimSpec, generate, oracle_density, oracle_loglik, oracle_quantile
from .tree import DensityTree, TreeConfig, grow_tree, importance, node_fit, split_gain

__version__ = "0.1.0"

__all__ = [
    "BinGrid",
    "BinnedSample",
    "BoostConfig",
    "BoostModel",
    "CarryingDensity",
    "CenteringModel",
    "ConvergenceError",
    "DensityTree",
    "EvalReport",
    "IdentityBasis",
    "LindseyFit",
    "MeanConfig",
    "NumericError",
    "PenaltyMatrix",
    "RawSplineBasis",
    "SimSpec",
    "SplineBasis",
    "TransformRecord",
    "TreeConfig",
    "build_basis",
    "build_raw_basis",
    "compute_penalty_matrix",
    "degrees_of_freedom",
    "density_at",
    "diagonalize",
    "discretize",
    "evaluate_model",
    "fit",
    "fit_mean",
    "fit_poisson",
    "generate",
    "goodness_of_fit",
    "grow_tree",
    "importance",
    "lambda_for_df",
    "load_model",
    "loglik",
    "node_fit",
    "oracle_density",
    "oracle_loglik",
    "oracle_quantile",
    "quantile_loss",
    "save_model",
    "select_boxcox",
    "split_gain",
]
