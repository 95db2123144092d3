"""Mondrian processes, Mondrian forests and Mondrian kernel approximations."""

__version__ = "0.1.0"

from .core import (
    BoundedBox,
    MondrianTree,
    RngStream,
    cut_schedule,
    cuts_1d,
    extend_conditional,
    leaf_of,
    linear_dimension,
    restrict,
    sample_exp,
    sample_first_cut,
    sample_mondrian,
    sample_trees,
)
from .forest import GaussianParams, forward_path, gaussian_posterior, predict, train_forest
from .grid import init_grid, run_search, select_features
from .kernel_approx import backward_path, build_features, fit_eval

__all__ = [
    "BoundedBox",
    "MondrianTree",
    "RngStream",
    "cut_schedule",
    "cuts_1d",
    "extend_conditional",
    "leaf_of",
    "linear_dimension",
    "restrict",
    "sample_exp",
    "sample_first_cut",
    "sample_mondrian",
    "sample_trees",
    "GaussianParams",
    "forward_path",
    "gaussian_posterior",
    "predict",
    "train_forest",
    "init_grid",
    "run_search",
    "select_features",
    "backward_path",
    "build_features",
    "fit_eval",
]
