"""Factor-analysis models for sparse user-item ratings, fitted by EM and variational EM."""

from .core import (
    BipartiteIndex,
    FitReport,
    ModelConfig,
    ModelParams,
    ModelVariant,
    PosteriorSummary,
    RatingsTriples,
    mean_square_error,
    predict_many,
    predict_rating,
    validate_and_index,
)
from .em import fit_em
from .vem import fit_vem

__version__ = "0.1.0"


def fit(data, config, index=None, params=None):
    """Fit ``config.variant`` with exact EM or factored variational EM as appropriate."""
    if config.variant.solver == "vem":
        return fit_vem(data, config, index=index, params=params)
    return fit_em(data, config, index=index, params=params)
