"""Makarov bounds on the conditional distribution of treatment effects."""

from .dist import Dataset, EvalGrid, GridCdf, GridQuantile, crps_distance, w2_sq_distance
from .makarov import BoundsPair, DiscreteDist, cdf_bounds, cdf_bounds_mixed, quantile_bounds
from .learners import LearnerConfig, fit_learner

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EvalGrid",
    "GridCdf",
    "GridQuantile",
    "crps_distance",
    "w2_sq_distance",
    "BoundsPair",
    "DiscreteDist",
    "cdf_bounds",
    "cdf_bounds_mixed",
    "quantile_bounds",
    "LearnerConfig",
    "fit_learner",
]
