"""Sparse identification and unscented Kalman filtering for grid-tied PV units."""
from .adaptive_dse import EstimationReport, PipelineConfig, normalized_error, run_adaptive, run_estimation, run_identification
from .errors import (
    IdentificationError,
    InvalidInputError,
    InvalidParameterError,
    ObservabilityError,
    PvDseError,
    SingularityError,
)
from .observability import check_observability, observability_matrix, validate_selector
from .pv_models import SINGLE_STAGE, TWO_STAGE, PvParams, default_params
from .simulator import Scenario, simulate
from .sindy import SparseModel, default_pv_library, feature_select_sparse_regression, stls
from .ukf import GaussianBelief, UnscentedKalmanFilter, sigma_points, ukf_step

__version__ = "0.1.0"
