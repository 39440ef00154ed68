"""Sparse penalised estimation for finite mixtures of Gaussian regressions."""

from ._kernels import BACKEND
from .gem import (
    DegenerateComponentError,
    FitResult,
    active_set_schedule,
    e_step,
    fit_bcd_gem,
    init_responsibilities,
    m_step_component,
    m_step_pi,
    stationarity_check,
)
from .model import (
    BoundednessWarning,
    Dataset,
    MixtureParams,
    NaturalParams,
    PenaltySpec,
    SelectedSet,
    log_density,
    log_likelihood,
    neg_log_likelihood,
    penalized_nll,
    scale_shift_identity_check,
    selected_set,
    snr,
)
from .options import OptimOptions
from .scaled_lasso import (
    ScaledLassoFit,
    fit_scaled_lasso,
    kkt_check,
    lambda_max,
    phi_coordinate_update,
    rho_closed_form,
)

__version__ = "0.1.0"
