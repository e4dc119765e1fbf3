"""Built-in desk-scale test problems with known ground truth."""
from __future__ import annotations

import numpy as np

from .exceptions import ConfigError
from .problems import (
    ForwardModelTarget,
    InverseProblem,
    LogLikelihoodTarget,
    OdeSpec,
    Prior,
    PseudoMarginalTarget,
    ode_forward_model,
)


def conjugate_gaussian_1d(target="log-likelihood"):
    """1-D identity forward model with Gaussian prior: conjugate posterior.

    The truncation at +-6 prior standard deviations is numerically negligible,
    so the analytic conjugate posterior serves as the oracle.
    """
    sd0, sigma, y_o = 1.0, 0.7, 1.0
    prior = Prior("truncated-gaussian", lo=[-6.0], hi=[6.0], mean=[0.0], sd=[sd0])
    problem = InverseProblem(
        prior=prior,
        observation=[y_o],
        noise_cov=[[sigma**2]],
        target_kind=_target_kind(target),
        forward_model=lambda th: np.atleast_1d(th[0]),
        name="conjugate-gaussian-1d",
    )
    v_post = 1.0 / (1.0 / sd0**2 + 1.0 / sigma**2)
    problem.analytic_posterior = (v_post * y_o / sigma**2, v_post)  # (mean, var)
    return problem


def bimodal_1d(target="log-likelihood"):
    """Squared forward model: the posterior has symmetric modes at +-1."""
    prior = Prior("uniform", lo=[-2.0], hi=[2.0])
    return InverseProblem(
        prior=prior,
        observation=[1.0],
        noise_cov=[[0.3**2]],
        target_kind=_target_kind(target),
        forward_model=lambda th: np.atleast_1d(th[0] ** 2),
        name="bimodal-1d",
    )


def ode_linear_decay_2d(target="log-likelihood"):
    """Calibrate decay rate and initial value of dx/dt = -theta_1 x.

    The observation operator averages the trajectory over four equal-length
    windows, mimicking monthly-average observables.
    """
    spec = OdeSpec(
        rhs=lambda x, th: -th[0] * x,
        x0=lambda th: np.atleast_1d(th[1]),
        t0=0.0, t1=12.0, n_steps=240,
    )

    def obs_operator(traj):
        # mean state over each quarter of the trajectory
        chunks = np.array_split(traj[:, 0], 4)
        return np.array([c.mean() for c in chunks])

    def forward(th):
        return ode_forward_model(th, spec, obs_operator)

    theta_true = np.array([0.3, 1.2])
    y_o = forward(theta_true)
    prior = Prior("uniform", lo=[0.05, 0.5], hi=[1.0, 2.0])
    problem = InverseProblem(
        prior=prior,
        observation=y_o,
        noise_cov=0.05**2 * np.eye(4),
        target_kind=_target_kind(target),
        forward_model=forward,
        name="ode-linear-decay-2d",
    )
    problem.theta_true = theta_true
    return problem


def pm_gaussian_toy(replicates=10):
    """Gaussian latent toy: y|z ~ N(z, 1), z|theta ~ N(theta, 1).

    The marginal likelihood is N(y_o | theta, 2) in closed form, so the
    pseudo-marginal chain has an analytic target for comparison.
    """
    y_o = 0.5

    def latent_sampler(theta, m, rng):
        return theta[0] + rng.standard_normal(m)

    def conditional_density(y, theta, z):
        # standard-normal density, inlined for speed in long chains
        return np.exp(-0.5 * (y[0] - z) ** 2) / np.sqrt(2.0 * np.pi)

    prior = Prior("uniform", lo=[-6.0], hi=[6.0])
    problem = InverseProblem(
        prior=prior,
        observation=[y_o],
        noise_cov=[[2.0]],
        target_kind=PseudoMarginalTarget(replicates, latent_sampler, conditional_density),
        forward_model=lambda th: np.atleast_1d(th[0]),
        name="pm-gaussian-toy",
    )
    problem.analytic_posterior = (y_o, 2.0)   # uniform prior: mean y_o, var 2
    return problem


def _target_kind(name):
    if name == "log-likelihood":
        return LogLikelihoodTarget()
    if name == "forward-model":
        return ForwardModelTarget()
    raise ConfigError(f"unknown target kind {name!r} for built-in problem")


BUILTIN_PROBLEMS = {
    "conjugate-gaussian-1d": conjugate_gaussian_1d,
    "bimodal-1d": bimodal_1d,
    "ode-linear-decay-2d": ode_linear_decay_2d,
    "pm-gaussian-toy": pm_gaussian_toy,
}


def get_builtin(name, **kwargs):
    try:
        factory = BUILTIN_PROBLEMS[name]
    except KeyError:
        raise ConfigError(
            f"unknown built-in problem {name!r}; available: {sorted(BUILTIN_PROBLEMS)}"
        ) from None
    return factory(**kwargs)
