"""Bayesian inverse problem definitions and emulator targets.

Priors on a box, Gaussian likelihoods, a fixed-step RK4 ODE forward model,
and the noisy log-likelihood estimators (synthetic likelihood, ABC,
pseudo-marginal) together with a budget ledger that accounts for every
simulator call.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .exceptions import FactorizationError, InputError, IntegrationError

# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prior:
    """Uniform-box or independent truncated-Gaussian prior on a box."""

    family: str                 # "uniform" | "truncated-gaussian"
    lo: np.ndarray
    hi: np.ndarray
    mean: np.ndarray | None = None
    sd: np.ndarray | None = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if np.any(lo >= hi):
            raise InputError("prior box must satisfy lo < hi per dimension")
        if self.family == "truncated-gaussian":
            if self.mean is None or self.sd is None:
                raise InputError("truncated-gaussian prior needs mean and sd")
            object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, float)))
            object.__setattr__(self, "sd", np.atleast_1d(np.asarray(self.sd, float)))
        elif self.family != "uniform":
            raise InputError(f"unknown prior family {self.family!r}")

    @property
    def dim(self):
        return self.lo.shape[0]

    def log_density(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        inside = np.all((theta >= self.lo) & (theta <= self.hi), axis=1)
        out = np.full(theta.shape[0], -np.inf)
        if self.family == "uniform":
            out[inside] = -np.sum(np.log(self.hi - self.lo))
        else:
            # per-dimension truncated normal, normalized over the box
            z = norm.logpdf(theta, loc=self.mean, scale=self.sd)
            mass = (norm.cdf(self.hi, loc=self.mean, scale=self.sd)
                    - norm.cdf(self.lo, loc=self.mean, scale=self.sd))
            out[inside] = np.sum(z - np.log(mass), axis=1)[inside]
        return out

    def sample(self, n, rng):
        if self.family == "uniform":
            return rng.uniform(self.lo, self.hi, size=(n, self.dim))
        # inverse-CDF sampling of the per-dimension truncated normal
        a = norm.cdf(self.lo, loc=self.mean, scale=self.sd)
        b = norm.cdf(self.hi, loc=self.mean, scale=self.sd)
        u = rng.uniform(size=(n, self.dim))
        return norm.ppf(a + u * (b - a), loc=self.mean, scale=self.sd)


# ---------------------------------------------------------------------------
# target kinds and budget accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForwardModelTarget:
    kind: str = "forward-model"


@dataclass(frozen=True)
class LogLikelihoodTarget:
    kind: str = "log-likelihood"


@dataclass(frozen=True)
class NoisySLTarget:
    """Synthetic-likelihood estimator settings: M replicates, summary map."""

    replicates: int
    summary: object = None       # callable S(y) -> (S,), identity if None
    kind: str = "noisy-sl"

    def __post_init__(self):
        if self.replicates < 2:
            raise InputError("synthetic likelihood needs at least 2 replicates")


@dataclass(frozen=True)
class NoisyABCTarget:
    """Indicator-kernel ABC estimator settings."""

    replicates: int
    epsilon: float
    summary: object = None
    kind: str = "noisy-abc"

    def __post_init__(self):
        if self.replicates < 1:
            raise InputError("ABC needs at least 1 replicate")
        if self.epsilon <= 0:
            raise InputError("ABC bandwidth epsilon must be positive")


@dataclass(frozen=True)
class PseudoMarginalTarget:
    """Unbiased likelihood estimate from latent-variable averaging."""

    replicates: int
    latent_sampler: object       # (theta, M, rng) -> (M, ...) latents
    conditional_density: object  # (y_o, theta, latents) -> (M,) densities
    kind: str = "pseudo-marginal"

    def __post_init__(self):
        if self.replicates < 1:
            raise InputError("pseudo-marginal estimate needs at least 1 replicate")


class BudgetLedger:
    """Append-only simulator-call counter, safe for concurrent increments."""

    def __init__(self):
        self._lock = threading.Lock()
        self._calls = 0
        self._events = []

    def record(self, n_calls, note=""):
        with self._lock:
            self._calls += int(n_calls)
            self._events.append((int(n_calls), note))

    @property
    def total_calls(self):
        return self._calls

    @property
    def events(self):
        return tuple(self._events)


@dataclass
class InverseProblem:
    """A prior, an observation with Gaussian noise, and an emulator target."""

    prior: Prior
    observation: np.ndarray
    noise_cov: np.ndarray
    target_kind: object
    forward_model: object = None         # deterministic theta -> (P,)
    simulator: object = None             # stochastic (theta, rng) -> sample
    name: str = "problem"
    ledger: BudgetLedger = field(default_factory=BudgetLedger)

    def __post_init__(self):
        self.observation = np.atleast_1d(np.asarray(self.observation, dtype=float))
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if not np.all(np.isfinite(self.observation)):
            raise InputError("observation must be finite")
        p = self.observation.shape[0]
        if self.noise_cov.shape != (p, p):
            raise InputError("noise covariance does not match observation dimension")

    @property
    def dim(self):
        return self.prior.dim

    def exact_loglik(self, theta):
        """Exact log-likelihood for deterministic targets."""
        if self.forward_model is None:
            raise InputError("no deterministic forward model available")
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        out = np.empty(theta.shape[0])
        for i, t in enumerate(theta):
            g = self.forward_model(t)
            self.ledger.record(1, "forward-model")
            out[i] = gaussian_loglik(g, self.observation, self.noise_cov)
        return out

    def log_unnormalized_posterior(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        lp = self.prior.log_density(theta)
        out = np.full(theta.shape[0], -np.inf)
        inside = np.isfinite(lp)
        if np.any(inside):
            out[inside] = lp[inside] + self.exact_loglik(theta[inside])
        return out


# ---------------------------------------------------------------------------
# likelihood building blocks
# ---------------------------------------------------------------------------


def gaussian_loglik(model_output, y_o, noise_cov):
    """Gaussian log-likelihood -P/2 log 2pi - 1/2 log|S| - 1/2 ||y-g||^2_S."""
    g = np.atleast_1d(np.asarray(model_output, dtype=float))
    y = np.atleast_1d(np.asarray(y_o, dtype=float))
    s = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    try:
        cf = cho_factor(s, lower=True)
    except np.linalg.LinAlgError as e:
        raise FactorizationError("noise covariance is not positive definite") from e
    r = y - g
    quad = r @ cho_solve(cf, r)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return float(-0.5 * y.shape[0] * np.log(2 * np.pi) - 0.5 * logdet - 0.5 * quad)


@dataclass(frozen=True)
class OdeSpec:
    """Fixed-step initial value problem dx/dt = F(x, theta) on [t0, t1]."""

    rhs: object
    x0: object                  # initial state, or callable theta -> state
    t0: float
    t1: float
    n_steps: int = 200


def ode_forward_model(theta, ode_spec: OdeSpec, obs_operator=None):
    """Integrate the IVP with fixed-step RK4 and apply the observation operator.

    Returns the observable vector; raises IntegrationError naming the step if
    the state blows up.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if not np.all(np.isfinite(theta)):
        raise InputError("theta must be finite")
    x0 = ode_spec.x0(theta) if callable(ode_spec.x0) else ode_spec.x0
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    k = ode_spec.n_steps
    h = (ode_spec.t1 - ode_spec.t0) / k
    traj = np.empty((k + 1, x.shape[0]))
    traj[0] = x
    t = ode_spec.t0
    f = ode_spec.rhs
    for step in range(k):
        k1 = f(x, theta)
        k2 = f(x + 0.5 * h * k1, theta)
        k3 = f(x + 0.5 * h * k2, theta)
        k4 = f(x + h * k3, theta)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at step {step + 1}")
        traj[step + 1] = x
        t += h
    if obs_operator is None:
        return traj[-1]
    return np.atleast_1d(np.asarray(obs_operator(traj), dtype=float))


# ---------------------------------------------------------------------------
# noisy log-likelihood estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimObservation:
    """One (possibly noisy) observation of the emulator target."""

    input: np.ndarray
    value: float | np.ndarray
    replicate_count: int
    simulator_calls: int
    flagged: bool = False
    flag_reason: str = ""


def _summarize(summary, y):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return y if summary is None else np.atleast_1d(np.asarray(summary(y), dtype=float))


def sl_loglik_estimate(theta, problem: InverseProblem, rng) -> SimObservation:
    """Synthetic-likelihood estimate log N(S(y_o) | m_M, C_M) at theta."""
    tk = problem.target_kind
    if not isinstance(tk, NoisySLTarget):
        raise InputError("problem target is not synthetic likelihood")
    m = tk.replicates
    s_obs = _summarize(tk.summary, problem.observation)
    s_dim = s_obs.shape[0]
    if m < s_dim + 2:
        raise InputError("need M >= S + 2 replicates for an invertible sample covariance")
    sims = np.stack([
        _summarize(tk.summary, problem.simulator(theta, rng)) for _ in range(m)
    ])
    problem.ledger.record(m, "sl")
    mean = sims.mean(axis=0)
    cov = np.atleast_2d(np.cov(sims, rowvar=False, ddof=1))
    flagged = False
    try:
        val = gaussian_loglik(s_obs, mean, cov)
    except FactorizationError:
        cov = cov + (1e-8 * np.trace(cov) / s_dim) * np.eye(s_dim)
        flagged = True
        val = gaussian_loglik(s_obs, mean, cov)   # raises if still singular
    return SimObservation(np.atleast_1d(theta), val, m, m, flagged,
                          "covariance-jittered" if flagged else "")


def abc_loglik_estimate(theta, problem: InverseProblem, rng) -> SimObservation:
    """Indicator-kernel ABC estimate log[(1/M) sum 1(||S(y)-S(y_o)|| < eps)].

    Zero acceptances return the finite pseudo-count floor log(1/(M(M+1)))
    instead of -inf, with the observation flagged.
    """
    tk = problem.target_kind
    if not isinstance(tk, NoisyABCTarget):
        raise InputError("problem target is not ABC")
    m = tk.replicates
    s_obs = _summarize(tk.summary, problem.observation)
    accept = 0
    for _ in range(m):
        s = _summarize(tk.summary, problem.simulator(theta, rng))
        if np.linalg.norm(s - s_obs) < tk.epsilon:
            accept += 1
    problem.ledger.record(m, "abc")
    if accept == 0:
        return SimObservation(np.atleast_1d(theta), float(-np.log(m * (m + 1))),
                              m, m, True, "zero-acceptance floor")
    return SimObservation(np.atleast_1d(theta), float(np.log(accept / m)), m, m)


def pseudo_marginal_loglik_estimate(theta, problem: InverseProblem, rng) -> SimObservation:
    """Log of the unbiased likelihood estimate (1/M) sum p(y_o | theta, z_m)."""
    tk = problem.target_kind
    if not isinstance(tk, PseudoMarginalTarget):
        raise InputError("problem target is not pseudo-marginal")
    m = tk.replicates
    latents = tk.latent_sampler(theta, m, rng)
    dens = np.asarray(tk.conditional_density(problem.observation, theta, latents),
                      dtype=float)
    problem.ledger.record(m, "pseudo-marginal")
    if np.all(dens <= 0):
        return SimObservation(np.atleast_1d(theta), -np.inf, m, m, True, "all-zero density")
    with np.errstate(divide="ignore"):
        logs = np.log(dens)
    top = np.max(logs)
    val = top + np.log(np.mean(np.exp(logs - top)))
    return SimObservation(np.atleast_1d(theta), float(val), m, m)


def noisy_loglik_estimate(theta, problem: InverseProblem, rng) -> SimObservation:
    """Dispatch to the estimator matching the problem's target kind."""
    tk = problem.target_kind
    if isinstance(tk, NoisySLTarget):
        return sl_loglik_estimate(theta, problem, rng)
    if isinstance(tk, NoisyABCTarget):
        return abc_loglik_estimate(theta, problem, rng)
    if isinstance(tk, PseudoMarginalTarget):
        return pseudo_marginal_loglik_estimate(theta, problem, rng)
    raise InputError(f"no noisy estimator for target kind {tk!r}")


# ---------------------------------------------------------------------------
# grid ground truth
# ---------------------------------------------------------------------------


def make_grid(prior: Prior, n_nodes):
    """Tensor-product grid over the prior box; returns (nodes, axes)."""
    axes = [np.linspace(prior.lo[d], prior.hi[d], n_nodes) for d in range(prior.dim)]
    if prior.dim == 1:
        return axes[0][:, None], axes
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    return nodes, axes


def trapezoid_weights(axes):
    """Integration weights for a tensor-product trapezoid rule."""
    w = None
    for ax in axes:
        wa = np.gradient(ax)
        wa[0] = 0.5 * (ax[1] - ax[0])
        wa[-1] = 0.5 * (ax[-1] - ax[-2])
        w = wa if w is None else np.multiply.outer(w, wa).ravel()
    return w


def grid_posterior_oracle(problem: InverseProblem, grid):
    """Ground-truth posterior density on a grid by direct normalization.

    Only available for deterministic targets in D <= 2; the reference for all
    posterior-error metrics.
    """
    if problem.dim > 2:
        raise InputError("grid oracle restricted to D <= 2")
    nodes, axes = grid if isinstance(grid, tuple) else (grid, None)
    if axes is None:
        nodes = np.atleast_2d(np.asarray(grid, dtype=float))
        if problem.dim != 1:
            raise InputError("pass (nodes, axes) for D = 2 grids")
        axes = [nodes[:, 0]]
    if min(len(ax) for ax in axes) < 32:
        raise InputError("grid too coarse: need at least 32 nodes per dimension")
    logpost = problem.log_unnormalized_posterior(nodes)
    w = trapezoid_weights(axes)
    top = np.max(logpost)
    dens = np.exp(logpost - top)
    z = np.sum(w * dens)
    return dens / z
