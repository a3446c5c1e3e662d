"""Conditional transformation models with structured and deep predictors."""

from ._version import __version__
from .basis import (
    BernsteinBasis,
    PenaltyMatrix,
    SplineBasis,
    bernstein_deriv,
    bernstein_eval,
    bspline_eval,
    difference_penalty,
    kron_sum_penalty,
    tensor_basis,
)
from .distributions import get_error_distribution
from .exceptions import (
    ConfigError,
    DataValidationError,
    DegenerateOutcomeError,
    DivergenceError,
    NumericGuardError,
)
from .model import DctmRegressor, interaction_predict, monotone_reparam, transformation_nll
from .simulate import (
    DgpSpec,
    coefficient_mse,
    get_dgp,
    neg_pls,
    rimse,
    run_simulation_suite,
    run_uci_benchmark,
    simulate,
)
from .terms import TermSpec, deep, intercept, linear, smooth, tensor_smooth
from .training import TrainingLog, df_to_lambda, grad_check, smoother_df

__all__ = [
    "__version__",
    "BernsteinBasis",
    "PenaltyMatrix",
    "SplineBasis",
    "bernstein_deriv",
    "bernstein_eval",
    "bspline_eval",
    "difference_penalty",
    "kron_sum_penalty",
    "tensor_basis",
    "get_error_distribution",
    "ConfigError",
    "DataValidationError",
    "DegenerateOutcomeError",
    "DivergenceError",
    "NumericGuardError",
    "DctmRegressor",
    "interaction_predict",
    "monotone_reparam",
    "transformation_nll",
    "DgpSpec",
    "coefficient_mse",
    "get_dgp",
    "neg_pls",
    "rimse",
    "run_simulation_suite",
    "run_uci_benchmark",
    "simulate",
    "TermSpec",
    "deep",
    "intercept",
    "linear",
    "smooth",
    "tensor_smooth",
    "TrainingLog",
    "df_to_lambda",
    "grad_check",
    "smoother_df",
]
