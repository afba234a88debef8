"""Sequential Bayesian linear regression by integrating Riccati ODEs."""

from .core import (
    DataBlock,
    FlowSample,
    MalformedState,
    GaussianPrior,
    PosteriorSummary,
    RiccatiState,
    closed_form_posterior,
    closed_form_state,
    evolve,
    evolve_staged,
    expected_hamiltonian,
    incorporate,
    init_state,
    load_state,
    posterior,
    retract,
    riccati_rhs,
    save_state,
    state_from_posterior,
    state_from_text,
    state_to_text,
    tune_observation_variance,
)
from .prior import (
    CovarianceRetune,
    matrix_inv_sqrt,
    retarget_prior_mean,
    scale_prior_covariance,
    tune_prior_covariance,
)

__version__ = "0.1.0"
