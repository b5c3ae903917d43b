"""Multimodal dictionary learning with joint-sparsity scale-mixture priors."""

__version__ = "0.1.0"

from .model import (
    AnnealSchedule,
    Classifier,
    ModelState,
    MultimodalDataset,
    PriorSpec,
    SelectorMatrices,
    SupportTree,
    ValidationError,
    balance_tree,
    build_selectors,
    most_uniform_tree,
    normalize_columns,
    singleton_tree,
)
from .posterior import (
    ConvergenceError,
    NumericalError,
    PosteriorStats,
    log_marginal,
    log_marginal_hier,
    posterior_approx,
    posterior_exact,
    posterior_hier,
    posterior_td,
    posterior_woodbury,
    sigma_loglik_derivative,
)

__all__ = [
    "AnnealSchedule",
    "Classifier",
    "ConvergenceError",
    "ModelState",
    "MultimodalDataset",
    "NumericalError",
    "PosteriorStats",
    "PriorSpec",
    "SelectorMatrices",
    "SupportTree",
    "ValidationError",
    "balance_tree",
    "build_selectors",
    "log_marginal",
    "log_marginal_hier",
    "most_uniform_tree",
    "normalize_columns",
    "posterior_approx",
    "posterior_exact",
    "posterior_hier",
    "posterior_td",
    "posterior_woodbury",
    "sigma_loglik_derivative",
    "singleton_tree",
]
