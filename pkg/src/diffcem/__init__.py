"""Differentiable cross-entropy method optimizers and experiment harnesses."""

__version__ = "0.1.0"

from . import autodiff
from .lml import LmlProblem, LmlSolution, lml_project, lml_vjp, lml_as_primitive
from .optimizers import (
    DcemConfig,
    GaussianDistribution,
    IterationTrace,
    NonFiniteValueError,
    cem,
    dcem,
    dcem_rows,
    gaussian_fit_hard,
    gaussian_fit_soft,
    hard_topk_indicator,
    unrolled_gd,
)

__all__ = [
    "autodiff",
    "LmlProblem",
    "LmlSolution",
    "lml_project",
    "lml_vjp",
    "lml_as_primitive",
    "DcemConfig",
    "GaussianDistribution",
    "IterationTrace",
    "NonFiniteValueError",
    "cem",
    "dcem",
    "dcem_rows",
    "gaussian_fit_hard",
    "gaussian_fit_soft",
    "hard_topk_indicator",
    "unrolled_gd",
    "__version__",
]
