import numpy as np
import pytest

from surropost import gp as gpmod
from surropost.estimators import SurrogatePosterior
from surropost.problems import InverseProblem, LogLikelihoodTarget, Prior
from surropost.testbeds import get_builtin


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def small_gp(seed=0, n=6, noise=0.0, lengthscale=0.8, signal_variance=1.5):
    """A small 1-D GP on [-2, 2] with sinusoidal responses."""
    r = np.random.default_rng(seed)
    x = np.sort(r.uniform(-2.0, 2.0, n))[:, None]
    y = np.sin(1.3 * x[:, 0])
    kern = gpmod.Kernel(lengthscales=[lengthscale], signal_variance=signal_variance)
    return gpmod.fit_gp(x, y, kern, gpmod.MeanFunction("zero"), noise)


def ldens_surrogate(gp, lo=-2.0, hi=2.0):
    """Bind a log-density emulator to a trivial uniform-prior problem."""
    prior = Prior("uniform", lo=[lo], hi=[hi])
    problem = InverseProblem(prior=prior, observation=[0.0], noise_cov=[[1.0]],
                             target_kind=LogLikelihoodTarget(), name="test")
    return SurrogatePosterior(emulator=gp, problem=problem)


def fitted_surrogate(problem_name, n_design=8, seed=0, mean_family="constant"):
    """Fit a log-density emulator to a built-in problem from prior samples."""
    problem = get_builtin(problem_name)
    r = np.random.default_rng(seed)
    x = problem.prior.sample(n_design, r)
    y = problem.exact_loglik(x)
    kern, nv, mfun = gpmod.optimize_hyperparameters(x, y, mean_family, seed=seed)
    gp = gpmod.fit_gp(x, y, kern, mfun, nv)
    return SurrogatePosterior(emulator=gp, problem=problem)
