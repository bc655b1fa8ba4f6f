"""Two-regime Markov-switching spatio-temporal log-ARCH models."""

__version__ = "0.1.0"

from .estimation import EstimationResult, FitOptions, bic, fit_one_regime, fit_two_regime, std_errors
from .filtering import FilterOutput, SmoothedPath, hamilton_filter, kim_smooth, log_cond_density, loglik
from .model import (
    MU_EPS,
    LogSquaredPanel,
    ModelParams,
    Panel,
    RegimeParams,
    RegimePath,
    TransitionMatrix,
    log_square,
    study_dgp,
    simulate,
    stationary_dist,
)
from .weights import (
    DistanceMatrix,
    UnivariateLogArchFit,
    WeightMatrix,
    ZeroPolicy,
    build_queen_grid,
    fit_log_arch,
    knn_weights,
    piccolo_distance,
    row_normalize,
)
