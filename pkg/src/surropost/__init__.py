"""Surrogate-based Bayesian posterior estimation.

GP emulation of expensive forward models and log-likelihoods, uncertainty-
aware posterior estimators, MCMC samplers, batch-sequential active learning,
and a CLI that writes reproducible CSV/JSON artifacts.
"""
from .active import (
    ALConfig,
    DesignHistory,
    RhoMeasure,
    TemperSchedule,
    acq_ecu_var_fwd,
    acq_ecu_var_ldens,
    acq_maxvar_ldens,
    acq_weighted_ivar,
    mh_with_refinement,
    optimize_batch,
    run_active_learning,
    sample_batch,
)
from .estimators import (
    PosteriorEstimate,
    SurrogatePosterior,
    ep_grid_mixture_density,
    estimate_eup,
    estimate_on_grid,
    estimate_plug_in,
    pointwise_log_density,
    pushforward_moments_fwd,
    pushforward_moments_ldens,
    sample_ep,
    tv_distance_grid,
    tv_samples_vs_grid,
)
from .exceptions import (
    ConfigError,
    DegenerateEstimateError,
    DegenerateUpdateError,
    FactorizationError,
    FittingError,
    InputError,
    IntegrationError,
    SurropostError,
    UnsupportedKernelError,
)
from .gp import (
    GpEmulator,
    Kernel,
    MeanFunction,
    MultiOutputGp,
    conditional_variance,
    dist_of_updated_mean,
    fit_gp,
    fit_multi_output_gp,
    loo_diagnostics,
    optimize_hyperparameters,
    predict,
    predict_mean_var,
    sample_marginal,
    sample_trajectory,
    update_gp,
)
from .problems import (
    BudgetLedger,
    ForwardModelTarget,
    InverseProblem,
    LogLikelihoodTarget,
    NoisyABCTarget,
    NoisySLTarget,
    OdeSpec,
    Prior,
    PseudoMarginalTarget,
    gaussian_loglik,
    grid_posterior_oracle,
    make_grid,
    noisy_loglik_estimate,
    ode_forward_model,
)
from .samplers import Chain, MhConfig, chain_diagnostics, pm_mh, rwmh
from .testbeds import BUILTIN_PROBLEMS, get_builtin
from .verify import run_verification_battery

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
