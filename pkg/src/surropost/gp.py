"""Gaussian-process regression core.

Exact conditioning with a squared-exponential kernel, fast batch updates,
marginal and trajectory sampling, marginal-likelihood hyperparameter fitting,
and closed-form leave-one-out diagnostics. A fitted emulator is immutable:
every operation that changes the training set returns a new object.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.stats import qmc

from .exceptions import (
    DegenerateUpdateError,
    FactorizationError,
    FittingError,
    InputError,
    UnsupportedKernelError,
)

logger = logging.getLogger(__name__)

_MAX_JITTER_DOUBLINGS = 8


# ---------------------------------------------------------------------------
# kernel and mean function
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Kernel:
    """Anisotropic squared-exponential kernel with additive diagonal jitter."""

    lengthscales: np.ndarray
    signal_variance: float
    jitter: float | None = None
    family: str = "squared-exponential"

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if np.any(ls <= 0) or self.signal_variance <= 0:
            raise InputError("lengthscales and signal_variance must be strictly positive")
        if self.family != "squared-exponential":
            raise UnsupportedKernelError(f"unknown kernel family {self.family!r}")
        if self.jitter is None:
            object.__setattr__(self, "jitter", 1e-10 * self.signal_variance)

    def __call__(self, x, z=None):
        """Kernel matrix between point sets x (A,D) and z (B,D)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = x if z is None else np.atleast_2d(np.asarray(z, dtype=float))
        dx = (x[:, None, :] - z[None, :, :]) / self.lengthscales
        return self.signal_variance * np.exp(-0.5 * np.sum(dx * dx, axis=2))

    def diag(self, x):
        x = np.atleast_2d(x)
        return np.full(x.shape[0], self.signal_variance)


@dataclass(frozen=True)
class MeanFunction:
    """Prior mean: zero, constant, or affine in the inputs."""

    family: str = "zero"
    constant: float = 0.0
    coefficients: np.ndarray | None = None  # (D,) slope for the affine family

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.family == "zero":
            return np.zeros(x.shape[0])
        if self.family == "constant":
            return np.full(x.shape[0], float(self.constant))
        if self.family == "affine":
            coef = np.asarray(self.coefficients, dtype=float)
            return float(self.constant) + x @ coef
        raise InputError(f"unknown mean family {self.family!r}")


# ---------------------------------------------------------------------------
# emulator container
# ---------------------------------------------------------------------------

def _chol_with_jitter(K, jitter):
    """Lower Cholesky of K + jitter*I, doubling the jitter on failure."""
    j = jitter
    for attempt in range(_MAX_JITTER_DOUBLINGS + 1):
        try:
            L = cholesky(K + j * np.eye(K.shape[0]), lower=True)
            if attempt > 0:
                logger.debug("factorization needed jitter escalation to %.3e", j)
            return L
        except np.linalg.LinAlgError:
            j *= 2.0
    raise FactorizationError(
        f"covariance not positive definite after {_MAX_JITTER_DOUBLINGS} jitter doublings"
    )


@dataclass(frozen=True)
class GpEmulator:
    """A GP conditioned on its design data, with the factorization cached."""

    design_inputs: np.ndarray      # (N, D)
    design_responses: np.ndarray   # (N,)
    noise_variance: float
    kernel: Kernel
    mean: MeanFunction
    chol_K: np.ndarray = field(repr=False)   # lower triangular
    alpha: np.ndarray = field(repr=False)    # K^{-1} (y - m0(X))

    @property
    def n_design(self):
        return self.design_inputs.shape[0]

    @property
    def dim(self):
        return self.design_inputs.shape[1]


@dataclass(frozen=True)
class PredictiveDistribution:
    """Joint Gaussian predictive law at a finite set of points."""

    points: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    includes_noise: bool

    @property
    def variance(self):
        return np.clip(np.diag(self.cov), 0.0, None)


def fit_gp(design_inputs, design_responses, kernel, mean, noise_variance=0.0):
    """Condition a GP prior on the design data (kriging equations)."""
    x = np.atleast_2d(np.asarray(design_inputs, dtype=float))
    y = np.asarray(design_responses, dtype=float).ravel()
    if x.ndim != 2 or x.shape[0] < 1:
        raise InputError("design_inputs must be a nonempty (N, D) array")
    if y.shape[0] != x.shape[0]:
        raise InputError(
            f"got {x.shape[0]} design inputs but {y.shape[0]} responses"
        )
    if kernel.lengthscales.shape[0] != x.shape[1]:
        raise InputError("kernel lengthscales do not match input dimension")
    if noise_variance < 0:
        raise InputError("noise_variance must be nonnegative")
    if noise_variance == 0.0:
        _check_distinct(x, kernel)
    K = kernel(x) + noise_variance * np.eye(x.shape[0])
    L = _chol_with_jitter(K, kernel.jitter)
    resid = y - mean(x)
    alpha = cho_solve((L, True), resid)
    return GpEmulator(
        design_inputs=x, design_responses=y, noise_variance=float(noise_variance),
        kernel=kernel, mean=mean, chol_K=L, alpha=alpha,
    )


def _check_distinct(x, kernel, x_existing=None):
    ref = x if x_existing is None else x_existing
    scale = np.max(kernel.lengthscales)
    d = x[:, None, :] - ref[None, :, :]
    dist = np.sqrt(np.sum(d * d, axis=2))
    if x_existing is None:
        np.fill_diagonal(dist, np.inf)
    if np.any(dist < 1e-12 * max(scale, 1.0)):
        raise DegenerateUpdateError(
            "duplicate design points with zero noise variance make conditioning degenerate"
        )


def predict(gp: GpEmulator, points, include_noise=False) -> PredictiveDistribution:
    """Predictive mean and joint covariance at the query points."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(np.isfinite(p)):
        raise InputError("query points must be finite")
    kxp = gp.kernel(gp.design_inputs, p)          # (N, B)
    mean = gp.mean(p) + kxp.T @ gp.alpha
    v = solve_triangular(gp.chol_K, kxp, lower=True)
    cov = gp.kernel(p) - v.T @ v
    cov = 0.5 * (cov + cov.T)
    neg = np.diag(cov) < 0
    if np.any(neg):
        d = np.diag(cov).copy()
        if np.any(d < -1e-10):
            logger.warning("clamping negative predictive variance (min %.3e)", d.min())
        np.fill_diagonal(cov, np.clip(d, 0.0, None))
    if include_noise:
        cov = cov + gp.noise_variance * np.eye(p.shape[0])
    return PredictiveDistribution(points=p, mean=mean, cov=cov, includes_noise=include_noise)


def predict_mean_var(gp: GpEmulator, points):
    """Pointwise predictive mean and variance (no cross-covariances)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    kxp = gp.kernel(gp.design_inputs, p)
    mean = gp.mean(p) + kxp.T @ gp.alpha
    v = solve_triangular(gp.chol_K, kxp, lower=True)
    var = gp.kernel.diag(p) - np.sum(v * v, axis=0)
    return mean, np.clip(var, 0.0, None)


def update_gp(gp: GpEmulator, new_inputs, new_responses) -> GpEmulator:
    """Condition on an extra batch via a block-Cholesky update.

    Hyperparameters are held fixed; predictions match a from-scratch refit on
    the concatenated data.
    """
    xb = np.atleast_2d(np.asarray(new_inputs, dtype=float))
    if xb.size == 0:
        return gp
    yb = np.asarray(new_responses, dtype=float).ravel()
    if yb.shape[0] != xb.shape[0]:
        raise InputError("batch inputs and responses disagree in length")
    if gp.noise_variance == 0.0:
        _check_distinct(xb, gp.kernel, gp.design_inputs)
        _check_distinct(xb, gp.kernel)
    k12 = gp.kernel(gp.design_inputs, xb)
    k22 = gp.kernel(xb) + (gp.noise_variance + gp.kernel.jitter) * np.eye(xb.shape[0])
    l21 = solve_triangular(gp.chol_K, k12, lower=True).T       # (B, N)
    s = 0.5 * (k22 - l21 @ l21.T + (k22 - l21 @ l21.T).T)
    try:
        l22 = cholesky(s, lower=True)
    except np.linalg.LinAlgError:
        l22 = _chol_with_jitter(s, gp.kernel.jitter)
    n, b = gp.n_design, xb.shape[0]
    L = np.zeros((n + b, n + b))
    L[:n, :n] = gp.chol_K
    L[n:, :n] = l21
    L[n:, n:] = l22
    x_all = np.vstack([gp.design_inputs, xb])
    y_all = np.concatenate([gp.design_responses, yb])
    resid = y_all - gp.mean(x_all)
    alpha = cho_solve((L, True), resid)
    return dataclasses.replace(
        gp, design_inputs=x_all, design_responses=y_all, chol_K=L, alpha=alpha
    )


def conditional_variance(gp: GpEmulator, hypothetical_inputs, query_points):
    """Predictive variance after conditioning on a batch, responses unseen.

    The predictive kernel depends only on input locations, so no responses are
    needed. Returns the pointwise variance at the query points.
    """
    xb = np.atleast_2d(np.asarray(hypothetical_inputs, dtype=float))
    if xb.size == 0:
        return predict_mean_var(gp, query_points)[1]
    q = np.atleast_2d(np.asarray(query_points, dtype=float))
    x_all = np.vstack([gp.design_inputs, xb])
    K = gp.kernel(x_all) + gp.noise_variance * np.eye(x_all.shape[0])
    L = _chol_with_jitter(K, gp.kernel.jitter)
    kxq = gp.kernel(x_all, q)
    v = solve_triangular(L, kxq, lower=True)
    var = gp.kernel.diag(q) - np.sum(v * v, axis=0)
    return np.clip(var, 0.0, None)


def dist_of_updated_mean(gp: GpEmulator, batch_inputs, query_point):
    """Law of the updated predictive mean at one point, batch responses unseen.

    With the batch responses modeled by the predictive observation process,
    the updated mean at theta is Gaussian with the current mean and variance
    equal to the variance reduction s2_N - s2_{N+B}.
    """
    q = np.atleast_2d(np.asarray(query_point, dtype=float))
    xb = np.atleast_2d(np.asarray(batch_inputs, dtype=float))
    joint = predict(gp, np.vstack([q, xb]), include_noise=False)
    m_q = joint.mean[0]
    c_qb = joint.cov[0, 1:]
    c_bb = joint.cov[1:, 1:] + gp.noise_variance * np.eye(xb.shape[0])
    L = _chol_with_jitter(c_bb, gp.kernel.jitter)
    v = solve_triangular(L, c_qb, lower=True)
    return float(m_q), float(max(np.dot(v, v), 0.0))


def sample_marginal(gp: GpEmulator, points, n_draws, rng):
    """Joint Gaussian draws from the predictive distribution at the points."""
    pred = predict(gp, points, include_noise=False)
    b = pred.points.shape[0]
    L = _chol_with_jitter(pred.cov, gp.kernel.jitter)
    z = rng.standard_normal((n_draws, b))
    return pred.mean[None, :] + z @ L.T


# ---------------------------------------------------------------------------
# trajectory sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryRealization:
    """One fixed realization of the random emulator function.

    Grid mode stores an exact joint draw on a fixed node set; feature mode is
    a pathwise-conditioned random-Fourier-feature trajectory evaluable at any
    input.
    """

    mode: str
    grid: np.ndarray | None = None
    grid_values: np.ndarray | None = None
    _feature_eval: object = field(default=None, repr=False)

    def __call__(self, theta):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if self.mode == "grid":
            idx = _grid_lookup(self.grid, theta)
            return self.grid_values[idx]
        return self._feature_eval(theta)


def _grid_lookup(grid, theta):
    idx = np.empty(theta.shape[0], dtype=int)
    for i, t in enumerate(theta):
        d = np.sum((grid - t[None, :]) ** 2, axis=1)
        j = int(np.argmin(d))
        if d[j] > 1e-18 * max(1.0, np.max(np.abs(grid))):
            raise InputError("grid-mode trajectory evaluated off its node set")
        idx[i] = j
    return idx


def sample_trajectory(gp: GpEmulator, mode="feature", rng=None, grid=None,
                      n_features=2048) -> TrajectoryRealization:
    """Draw one trajectory of the posterior GP.

    Grid mode is an exact joint Gaussian draw restricted to the node set.
    Feature mode combines a random-Fourier-feature prior draw with an exact
    kriging correction on the residuals at the design points, so the result
    is an approximate trajectory evaluable anywhere.
    """
    if rng is None:
        raise InputError("an rng is required for trajectory sampling")
    if mode == "grid":
        if grid is None:
            raise InputError("grid mode requires an evaluation set")
        g = np.atleast_2d(np.asarray(grid, dtype=float))
        vals = sample_marginal(gp, g, 1, rng)[0]
        return TrajectoryRealization(mode="grid", grid=g, grid_values=vals)
    if mode != "feature":
        raise InputError(f"unknown trajectory mode {mode!r}")
    if gp.kernel.family != "squared-exponential":
        raise UnsupportedKernelError(
            "feature-mode trajectories require a stationary (squared-exponential) kernel"
        )
    d = gp.dim
    omega = rng.standard_normal((n_features, d)) / gp.kernel.lengthscales[None, :]
    phase = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    weights = rng.standard_normal(n_features)
    amp = np.sqrt(2.0 * gp.kernel.signal_variance / n_features)

    def prior_draw(x):
        return gp.mean(x) + amp * np.cos(x @ omega.T + phase[None, :]) @ weights

    eps = (np.sqrt(gp.noise_variance) * rng.standard_normal(gp.n_design)
           if gp.noise_variance > 0 else 0.0)
    resid = gp.design_responses - prior_draw(gp.design_inputs) - eps
    coef = cho_solve((gp.chol_K, True), resid)

    def evaluate(x):
        return prior_draw(x) + gp.kernel(x, gp.design_inputs) @ coef

    return TrajectoryRealization(mode="feature", _feature_eval=evaluate)


# ---------------------------------------------------------------------------
# hyperparameter fitting
# ---------------------------------------------------------------------------

def log_marginal_likelihood(design_inputs, design_responses, kernel, mean, noise_variance):
    x = np.atleast_2d(np.asarray(design_inputs, dtype=float))
    y = np.asarray(design_responses, dtype=float).ravel()
    K = kernel(x) + noise_variance * np.eye(x.shape[0])
    L = _chol_with_jitter(K, kernel.jitter)
    resid = y - mean(x)
    a = cho_solve((L, True), resid)
    return float(
        -0.5 * resid @ a - np.sum(np.log(np.diag(L))) - 0.5 * x.shape[0] * np.log(2 * np.pi)
    )


def _profiled_mean(x, y, L, family):
    """Generalized-least-squares mean coefficients given the factorization."""
    if family == "zero":
        return MeanFunction("zero")
    if family == "constant":
        h = np.ones((x.shape[0], 1))
    elif family == "affine":
        h = np.hstack([np.ones((x.shape[0], 1)), x])
    else:
        raise InputError(f"unknown mean family {family!r}")
    kih = cho_solve((L, True), h)
    kiy = cho_solve((L, True), y)
    beta = np.linalg.solve(h.T @ kih, h.T @ kiy)
    if family == "constant":
        return MeanFunction("constant", constant=float(beta[0]))
    return MeanFunction("affine", constant=float(beta[0]), coefficients=beta[1:])


def optimize_hyperparameters(design_inputs, design_responses, mean_family="zero",
                             n_starts=8, seed=0, fit_noise=True):
    """Multi-start maximization of the log marginal likelihood.

    Lengthscales, signal variance and (optionally) noise variance are searched
    in log space with a Nelder-Mead simplex from quasi-random starts; mean
    coefficients are profiled out in closed form at each evaluation. Returns
    ``(Kernel, noise_variance, MeanFunction)`` for the best start.
    """
    x = np.atleast_2d(np.asarray(design_inputs, dtype=float))
    y = np.asarray(design_responses, dtype=float).ravel()
    n, d = x.shape
    if n < 3:
        raise InputError("hyperparameter fitting needs at least 3 design points")
    span = np.maximum(np.ptp(x, axis=0), 1e-8)
    yvar = max(np.var(y), 1e-12)

    def unpack(z):
        ls = np.exp(z[:d])
        sv = np.exp(z[d])
        nv = np.exp(z[d + 1]) if fit_noise else 0.0
        return ls, sv, nv

    def nll(z):
        ls, sv, nv = unpack(z)
        if np.any(ls > 1e6 * span.max()) or sv > 1e9 * yvar or sv < 1e-12 * yvar:
            return 1e12
        try:
            kern = Kernel(lengthscales=ls, signal_variance=sv)
            K = kern(x) + nv * np.eye(n)
            L = _chol_with_jitter(K, kern.jitter)
        except FactorizationError:
            return 1e12
        mfun = _profiled_mean(x, y, L, mean_family)
        resid = y - mfun(x)
        a = cho_solve((L, True), resid)
        return float(0.5 * resid @ a + np.sum(np.log(np.diag(L)))
                     + 0.5 * n * np.log(2 * np.pi))

    n_par = d + (2 if fit_noise else 1)
    sampler = qmc.Sobol(d=n_par, scramble=True, seed=seed)
    u = sampler.random(n_starts)
    # start boxes: lengthscale in [0.05, 2] x span, sv in [0.1, 10] x var(y),
    # noise in [1e-6, 1e-1] x var(y)
    lo = np.concatenate([np.log(0.05 * span), [np.log(0.1 * yvar)],
                         [np.log(1e-6 * yvar)] if fit_noise else []])
    hi = np.concatenate([np.log(2.0 * span), [np.log(10.0 * yvar)],
                         [np.log(1e-1 * yvar)] if fit_noise else []])
    starts = lo + u * (hi - lo)

    best = None
    for z0 in starts:
        res = minimize(nll, z0, method="Nelder-Mead",
                       options={"maxiter": 200 * n_par, "xatol": 1e-4, "fatol": 1e-6})
        f0 = nll(z0)
        fval = min(res.fun, f0)
        zval = res.x if res.fun <= f0 else z0
        if fval >= 1e12:
            continue
        if best is None or fval < best[0]:
            best = (fval, zval)
    if best is None:
        raise FittingError("all optimization starts failed factorization")
    ls, sv, nv = unpack(best[1])
    kern = Kernel(lengthscales=ls, signal_variance=sv)
    K = kern(x) + nv * np.eye(n)
    L = _chol_with_jitter(K, kern.jitter)
    mfun = _profiled_mean(x, y, L, mean_family)
    return kern, float(nv), mfun


# ---------------------------------------------------------------------------
# diagnostics and serialization
# ---------------------------------------------------------------------------

def loo_diagnostics(gp: GpEmulator):
    """Closed-form leave-one-out predictive moments and scores.

    Returns arrays ``(loo_mean, loo_variance, standardized_residual,
    log_score)``; the variance is that of the latent function value, and the
    standardized residual and log score include the observation noise.
    """
    n = gp.n_design
    if n < 2:
        raise InputError("LOO diagnostics need at least 2 design points")
    kinv = cho_solve((gp.chol_K, True), np.eye(n))
    diag = np.diag(kinv)
    y = gp.design_responses
    resid = y - gp.mean(gp.design_inputs)
    kiy = kinv @ resid
    loo_mean = y - kiy / diag
    obs_var = 1.0 / diag                      # predictive variance incl. noise
    loo_var = np.clip(obs_var - gp.noise_variance, 0.0, None)
    std_resid = (y - loo_mean) / np.sqrt(obs_var)
    log_score = -0.5 * np.log(2 * np.pi * obs_var) - 0.5 * std_resid**2
    return loo_mean, loo_var, std_resid, log_score


def emulator_to_dict(gp: GpEmulator) -> dict:
    return {
        "design_inputs": gp.design_inputs.tolist(),
        "design_responses": gp.design_responses.tolist(),
        "noise_variance": gp.noise_variance,
        "kernel": {
            "family": gp.kernel.family,
            "lengthscales": gp.kernel.lengthscales.tolist(),
            "signal_variance": gp.kernel.signal_variance,
            "jitter": gp.kernel.jitter,
        },
        "mean": {
            "family": gp.mean.family,
            "constant": gp.mean.constant,
            "coefficients": (None if gp.mean.coefficients is None
                             else np.asarray(gp.mean.coefficients).tolist()),
        },
    }


def emulator_from_dict(d: dict) -> GpEmulator:
    kern = Kernel(
        lengthscales=np.asarray(d["kernel"]["lengthscales"]),
        signal_variance=d["kernel"]["signal_variance"],
        jitter=d["kernel"]["jitter"],
        family=d["kernel"]["family"],
    )
    coeffs = d["mean"]["coefficients"]
    mfun = MeanFunction(
        family=d["mean"]["family"], constant=d["mean"]["constant"],
        coefficients=None if coeffs is None else np.asarray(coeffs),
    )
    return fit_gp(np.asarray(d["design_inputs"]), np.asarray(d["design_responses"]),
                  kern, mfun, d["noise_variance"])


def emulator_to_json(gp: GpEmulator) -> str:
    return json.dumps(emulator_to_dict(gp), indent=2, sort_keys=True)


def emulator_from_json(s: str) -> GpEmulator:
    return emulator_from_dict(json.loads(s))


@dataclass(frozen=True)
class MultiOutputGp:
    """Independent per-output GPs sharing a common design input set."""

    emulators: tuple

    @property
    def n_outputs(self):
        return len(self.emulators)

    @property
    def design_inputs(self):
        return self.emulators[0].design_inputs

    @property
    def dim(self):
        return self.emulators[0].dim

    def predict_mean_var(self, points):
        """Stacked pointwise means (B,P) and variances (B,P)."""
        out = [predict_mean_var(e, points) for e in self.emulators]
        return np.stack([m for m, _ in out], axis=1), np.stack([v for _, v in out], axis=1)

    def conditional_variance(self, batch, points):
        return np.stack(
            [conditional_variance(e, batch, points) for e in self.emulators], axis=1
        )

    def update(self, new_inputs, new_responses):
        new_responses = np.atleast_2d(np.asarray(new_responses, dtype=float))
        return MultiOutputGp(tuple(
            update_gp(e, new_inputs, new_responses[:, i])
            for i, e in enumerate(self.emulators)
        ))


def fit_multi_output_gp(design_inputs, design_responses, kernels, means, noise_variance=0.0):
    y = np.atleast_2d(np.asarray(design_responses, dtype=float))
    ems = tuple(
        fit_gp(design_inputs, y[:, i], kernels[i], means[i], noise_variance)
        for i in range(y.shape[1])
    )
    return MultiOutputGp(ems)
