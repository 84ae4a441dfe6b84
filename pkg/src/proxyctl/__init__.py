"""Linear proxy-control estimators with reduced-rank nuisance models."""

from .errors import (
    ConfigError,
    DimensionError,
    InvalidInputError,
    NotPSDError,
    ParseError,
    ProxyCtlError,
    UnderIdentifiedError,
)
from .estimators import (
    DrEstimate,
    FixedRankEstimate,
    FoldPlan,
    estimate_2sls,
    estimate_adaptive,
    estimate_dr,
    estimate_fixed_rank,
    estimate_naive_ols,
)
from .inference import confidence_interval, variance
from .partialling import DataMatrices, residualize
from .simulate import DgpSpec, draw_dataset, draw_params, make_rng, population_moments

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataMatrices",
    "DgpSpec",
    "DimensionError",
    "DrEstimate",
    "FixedRankEstimate",
    "FoldPlan",
    "InvalidInputError",
    "NotPSDError",
    "ParseError",
    "ProxyCtlError",
    "UnderIdentifiedError",
    "confidence_interval",
    "draw_dataset",
    "draw_params",
    "estimate_2sls",
    "estimate_adaptive",
    "estimate_dr",
    "estimate_fixed_rank",
    "estimate_naive_ols",
    "make_rng",
    "population_moments",
    "residualize",
    "variance",
]
