"""Uncertainty-aware posterior approximations from a fitted emulator.

The emulator induces a random unnormalized density; this module implements
the plug-in mean, the expected unnormalized posterior (EUP, closed forms for
both target kinds), the expected posterior (EP, trajectory mixture sampling),
and the quantile and marginal-mode pointwise estimators, together with the
pointwise pushforward moments they derive from.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import gp as gpmod
from .exceptions import DegenerateEstimateError, InputError
from .problems import (
    ForwardModelTarget,
    InverseProblem,
    gaussian_loglik,
    make_grid,
    trapezoid_weights,
)

logger = logging.getLogger(__name__)

_LOG_MAX = np.log(np.finfo(float).max)


@dataclass(frozen=True)
class SurrogatePosterior:
    """Binding of a fitted emulator to an inverse problem."""

    emulator: object            # GpEmulator (log-density) or MultiOutputGp (forward)
    problem: InverseProblem

    @property
    def is_forward(self):
        return isinstance(self.problem.target_kind, ForwardModelTarget)

    def __post_init__(self):
        multi = isinstance(self.emulator, gpmod.MultiOutputGp)
        if self.is_forward and not multi:
            p = self.problem.observation.shape[0]
            if p != 1:
                raise InputError(
                    "forward-model target with P > 1 requires a MultiOutputGp"
                )
            object.__setattr__(
                self, "emulator", gpmod.MultiOutputGp((self.emulator,))
            )
        if not self.is_forward and multi:
            raise InputError("log-density target expects a scalar-output emulator")

    def log_prior(self, theta):
        return self.problem.prior.log_density(theta)

    def gp_mean_var(self, theta):
        """Predictive mean/variance: (B,) for log-density, (B,P) for forward."""
        if self.is_forward:
            return self.emulator.predict_mean_var(theta)
        return gpmod.predict_mean_var(self.emulator, theta)

    def log_plugin(self, theta):
        """Log unnormalized plug-in density log pi0 + target at the GP mean."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        lp = self.log_prior(theta)
        m, _ = self.gp_mean_var(theta)
        if self.is_forward:
            y, s = self.problem.observation, self.problem.noise_cov
            ll = np.array([gaussian_loglik(mi, y, s) for mi in m])
            return lp + ll
        return lp + m


@dataclass(frozen=True)
class PosteriorEstimate:
    """A normalized posterior approximation on a grid or as samples."""

    kind: str
    grid_nodes: np.ndarray | None = None
    grid_axes: list | None = None
    density: np.ndarray | None = None
    samples: np.ndarray | None = None
    weights: np.ndarray | None = None
    trajectory_ids: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def is_grid(self):
        return self.density is not None

    def moments(self):
        """First two moments per dimension: (mean (D,), variance (D,))."""
        if self.is_grid:
            w = trapezoid_weights(self.grid_axes) * self.density
            w = w / np.sum(w)
            mean = w @ self.grid_nodes
            var = w @ (self.grid_nodes - mean) ** 2
            return mean, var
        s = self.samples
        w = self.weights
        if w is None:
            return s.mean(axis=0), s.var(axis=0)
        w = w / w.sum()
        mean = w @ s
        return mean, w @ (s - mean) ** 2


# ---------------------------------------------------------------------------
# pointwise pushforward moments
# ---------------------------------------------------------------------------


def pushforward_moments_fwd(sp: SurrogatePosterior, theta):
    """Mean/variance of the random unnormalized density, forward-model target.

    Per-output-independent Gaussian predictive; the variance is the two-term
    difference of Gaussian densities from the squared-density identity.
    """
    if not sp.is_forward:
        raise InputError("pushforward_moments_fwd requires a forward-model target")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    y = sp.problem.observation
    sig = sp.problem.noise_cov
    p = y.shape[0]
    m, v = sp.gp_mean_var(theta)                  # (B,P) each
    pi0 = np.exp(sp.log_prior(theta))
    log_norm = 0.5 * p * np.log(2.0) + 0.5 * _logdet(2 * np.pi * sig)
    means = np.empty(theta.shape[0])
    variances = np.empty(theta.shape[0])
    for i in range(theta.shape[0]):
        s_n = np.diag(v[i])
        ll = gaussian_loglik(m[i], y, sig + s_n)
        means[i] = pi0[i] * np.exp(ll)
        t1 = gaussian_loglik(m[i], y, 0.5 * sig + s_n) - log_norm
        t2 = gaussian_loglik(m[i], y, 0.5 * (sig + s_n)) \
            - 0.5 * p * np.log(2.0) - 0.5 * _logdet(2 * np.pi * (sig + s_n))
        variances[i] = pi0[i] ** 2 * max(np.exp(t1) - np.exp(t2), 0.0)
    return means, variances


def _logdet(a):
    sign, ld = np.linalg.slogdet(np.atleast_2d(a))
    if sign <= 0:
        raise InputError("matrix must be positive definite")
    return ld


def pushforward_moments_ldens(sp: SurrogatePosterior, theta):
    """Log-normal mean/variance of the random density, log-density target.

    Overflow returns +inf with a logged flag; this is the known instability of
    the log-density pushforward.
    """
    if sp.is_forward:
        raise InputError("pushforward_moments_ldens requires a log-density target")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    m, v = sp.gp_mean_var(theta)
    lp = sp.log_prior(theta)
    log_mean = lp + m + 0.5 * v
    log_var = 2 * lp + _log_expm1(v) + 2 * m + v
    if np.any(log_mean > _LOG_MAX) or np.any(log_var > _LOG_MAX):
        logger.warning("log-normal pushforward moments overflowed to +inf")
    with np.errstate(over="ignore"):
        return np.exp(log_mean), np.exp(log_var)


def _log_expm1(v):
    """log(exp(v) - 1), overflow safe; -inf at v = 0."""
    v = np.asarray(v, dtype=float)
    out = np.full(v.shape, -np.inf)
    small = (v > 0) & (v < 30.0)
    with np.errstate(divide="ignore"):
        out[small] = np.log(np.expm1(v[small]))
    out[v >= 30.0] = v[v >= 30.0]
    return out


# ---------------------------------------------------------------------------
# pointwise log estimators
# ---------------------------------------------------------------------------


def log_eup_fwd(sp: SurrogatePosterior, theta):
    """log pi0 + log N(y_o | gp mean, noise_cov + gp variance)."""
    if not sp.is_forward:
        raise InputError("log_eup_fwd requires a forward-model target")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    y, sig = sp.problem.observation, sp.problem.noise_cov
    m, v = sp.gp_mean_var(theta)
    lp = sp.log_prior(theta)
    ll = np.array([gaussian_loglik(m[i], y, sig + np.diag(v[i]))
                   for i in range(theta.shape[0])])
    return lp + ll


def log_eup_ldens(sp: SurrogatePosterior, theta):
    """log pi0 + gp mean + half the gp variance (log-normal mean)."""
    if sp.is_forward:
        raise InputError("log_eup_ldens requires a log-density target")
    m, v = sp.gp_mean_var(theta)
    return sp.log_prior(theta) + m + 0.5 * v


def log_quantile_ldens(sp: SurrogatePosterior, theta, alpha):
    """Pointwise alpha-quantile of the log-normal pushforward, in log domain."""
    if not (0.0 < alpha < 1.0):
        raise InputError("alpha must lie in (0, 1)")
    if sp.is_forward:
        raise InputError("quantile estimator defined for log-density targets only")
    m, v = sp.gp_mean_var(theta)
    return sp.log_prior(theta) + m + norm.ppf(alpha) * np.sqrt(v)


def log_mode_ldens(sp: SurrogatePosterior, theta):
    """Pointwise mode of the log-normal pushforward, in log domain."""
    if sp.is_forward:
        raise InputError("mode estimator defined for log-density targets only")
    m, v = sp.gp_mean_var(theta)
    return sp.log_prior(theta) + m - v


_POINTWISE = {
    "plug-in": lambda sp, th: sp.log_plugin(th),
    "eup": lambda sp, th: (log_eup_fwd(sp, th) if sp.is_forward
                           else log_eup_ldens(sp, th)),
    "mode": log_mode_ldens,
    "expected-loglik": None,    # handled below
}


def log_expected_loglik_fwd(sp: SurrogatePosterior, theta):
    """Posterior estimate from the expected log-likelihood, forward target.

    Closed form: the plug-in Gaussian log-likelihood minus half the trace
    penalty. Included for completeness; not recommended over EP/EUP.
    """
    if not sp.is_forward:
        raise InputError("expected log-likelihood defined for forward targets")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    y, sig = sp.problem.observation, sp.problem.noise_cov
    m, v = sp.gp_mean_var(theta)
    sig_inv = np.linalg.inv(sig)
    lp = sp.log_prior(theta)
    out = np.empty(theta.shape[0])
    for i in range(theta.shape[0]):
        out[i] = gaussian_loglik(m[i], y, sig) - 0.5 * np.trace(sig_inv @ np.diag(v[i]))
    return lp + out


def pointwise_log_density(sp: SurrogatePosterior, theta, kind, alpha=0.9):
    """Evaluate the named pointwise estimator in log domain."""
    if kind == "quantile":
        return log_quantile_ldens(sp, theta, alpha)
    if kind == "expected-loglik":
        return log_expected_loglik_fwd(sp, theta)
    if kind not in _POINTWISE:
        raise InputError(f"unknown pointwise estimator {kind!r}")
    return _POINTWISE[kind](sp, theta)


# ---------------------------------------------------------------------------
# grid normalization and grid estimates
# ---------------------------------------------------------------------------


def normalize_on_grid(log_density_values, grid_axes):
    """exp(shifted log values) normalized by the trapezoid rule.

    -inf log values become zeros; +inf or NaN raise.
    """
    logv = np.asarray(log_density_values, dtype=float)
    if np.any(np.isnan(logv)) or np.any(np.isposinf(logv)):
        raise DegenerateEstimateError("non-finite log-density values on grid")
    top = np.max(logv)
    if not np.isfinite(top):
        raise DegenerateEstimateError("log-density is -inf everywhere on the grid")
    dens = np.exp(logv - top)
    w = trapezoid_weights(grid_axes)
    z = np.sum(w * dens)
    if z <= 0:
        raise DegenerateEstimateError("density integrates to zero on the grid")
    return dens / z


def estimate_on_grid(sp: SurrogatePosterior, kind, n_nodes=512, grid=None,
                     alpha=0.9) -> PosteriorEstimate:
    """Normalized grid density for any pointwise estimator (D <= 2)."""
    if sp.problem.dim > 2:
        raise InputError("grid estimation restricted to D <= 2")
    if grid is None:
        nodes, axes = make_grid(sp.problem.prior, n_nodes)
    else:
        nodes, axes = grid
    logv = pointwise_log_density(sp, nodes, kind, alpha=alpha)
    dens = normalize_on_grid(logv, axes)
    return PosteriorEstimate(kind=kind, grid_nodes=nodes, grid_axes=axes,
                             density=dens, metadata={"alpha": alpha} if kind == "quantile" else {})


def estimate_by_mcmc(sp: SurrogatePosterior, kind, config, alpha=0.9) -> PosteriorEstimate:
    """Sample the named pointwise estimator with adaptive random-walk MH."""
    from .samplers import rwmh   # local import to avoid a cycle

    def logdens(theta):
        return float(pointwise_log_density(sp, theta, kind, alpha=alpha)[0])

    chain = rwmh(logdens, sp.problem.prior, config)
    return PosteriorEstimate(kind=kind, samples=chain.states,
                             metadata={"acceptance_rate": chain.acceptance_rate})


def estimate_plug_in(sp, n_nodes=512, grid=None, mh_config=None):
    if mh_config is not None:
        return estimate_by_mcmc(sp, "plug-in", mh_config)
    return estimate_on_grid(sp, "plug-in", n_nodes=n_nodes, grid=grid)


def estimate_eup(sp, n_nodes=512, grid=None, mh_config=None):
    if mh_config is not None:
        return estimate_by_mcmc(sp, "eup", mh_config)
    return estimate_on_grid(sp, "eup", n_nodes=n_nodes, grid=grid)


# ---------------------------------------------------------------------------
# EP: trajectory-mixture sampling
# ---------------------------------------------------------------------------


def _trajectory_log_density(sp: SurrogatePosterior, traj, theta):
    """Log unnormalized density along one trajectory realization."""
    theta = np.atleast_2d(theta)
    lp = sp.log_prior(theta)
    if sp.is_forward:
        y, sig = sp.problem.observation, sp.problem.noise_cov
        vals = np.stack([t(theta) for t in traj], axis=1)     # (B, P)
        ll = np.array([gaussian_loglik(v, y, sig) for v in vals])
        return lp + ll
    return lp + traj(theta)


def _draw_trajectories_grid(sp, nodes, k, rng):
    """Exact joint trajectory values on the grid: (K, G) log-target values."""
    if sp.is_forward:
        per_output = [gpmod.sample_marginal(e, nodes, k, rng)
                      for e in sp.emulator.emulators]          # P x (K, G)
        y, sig = sp.problem.observation, sp.problem.noise_cov
        vals = np.stack(per_output, axis=2)                    # (K, G, P)
        out = np.empty(vals.shape[:2])
        for i in range(k):
            for j in range(vals.shape[1]):
                out[i, j] = gaussian_loglik(vals[i, j], y, sig)
        return out
    return gpmod.sample_marginal(sp.emulator, nodes, k, rng)


def ep_grid_mixture_density(sp: SurrogatePosterior, k, rng, n_nodes=512, grid=None):
    """Direct numerical EP: average of per-trajectory normalized grid densities."""
    nodes, axes = make_grid(sp.problem.prior, n_nodes) if grid is None else grid
    f_vals = _draw_trajectories_grid(sp, nodes, k, rng)
    lp = sp.log_prior(nodes)
    mix = np.zeros(nodes.shape[0])
    for i in range(k):
        mix += normalize_on_grid(lp + f_vals[i], axes)
    return PosteriorEstimate(kind="ep-grid-mixture", grid_nodes=nodes,
                             grid_axes=axes, density=mix / k, metadata={"K": k})


def _sample_from_grid_density(nodes, axes, dens, m, rng):
    """Inverse-CDF (1-D) or cell-categorical (2-D) draws from a grid density."""
    if len(axes) == 1:
        x = axes[0]
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(x))])
        cdf /= cdf[-1]
        u = rng.uniform(size=m)
        return np.interp(u, cdf, x)[:, None]
    w = trapezoid_weights(axes) * dens
    w = w / w.sum()
    idx = rng.choice(nodes.shape[0], size=m, p=w)
    # jitter within a cell so draws do not sit exactly on nodes
    steps = np.array([ax[1] - ax[0] for ax in axes])
    return nodes[idx] + rng.uniform(-0.5, 0.5, size=(m, len(axes))) * steps


def sample_ep(sp: SurrogatePosterior, k, m, rng, mode="grid", n_nodes=512,
              grid=None, mh_config=None, n_features=2048) -> PosteriorEstimate:
    """Sample the expected posterior: K trajectories, M draws from each.

    Grid mode draws exact joint trajectories on the grid and inverts each
    per-trajectory CDF; feature mode runs a random-walk MH chain per
    pathwise-conditioned trajectory. The pooled K*M draws carry trajectory ids
    for reproducible shuffling.
    """
    if k < 1 or m < 1:
        raise InputError("K and M must be at least 1")
    if mode == "grid":
        nodes, axes = make_grid(sp.problem.prior, n_nodes) if grid is None else grid
        f_vals = _draw_trajectories_grid(sp, nodes, k, rng)
        lp = sp.log_prior(nodes)
        samples, ids = [], []
        for i in range(k):
            dens = normalize_on_grid(lp + f_vals[i], axes)
            samples.append(_sample_from_grid_density(nodes, axes, dens, m, rng))
            ids.append(np.full(m, i))
        return PosteriorEstimate(
            kind="ep", samples=np.vstack(samples), trajectory_ids=np.concatenate(ids),
            metadata={"K": k, "M": m, "mode": "grid"},
        )
    if mode != "feature":
        raise InputError(f"unknown EP mode {mode!r}")
    from .samplers import MhConfig, rwmh

    if mh_config is None:
        mh_config = MhConfig(n_steps=max(4 * m, 500), seed=0)
    samples, ids = [], []
    for i in range(k):
        if sp.is_forward:
            traj = [gpmod.sample_trajectory(e, "feature", rng, n_features=n_features)
                    for e in sp.emulator.emulators]
        else:
            traj = gpmod.sample_trajectory(sp.emulator, "feature", rng,
                                           n_features=n_features)

        def logdens(theta, _traj=traj):
            return float(_trajectory_log_density(sp, _traj, theta)[0])

        cfg = mh_config.with_seed(int(rng.integers(2**63)))
        chain = rwmh(logdens, sp.problem.prior, cfg)
        kept = chain.states[-m:] if chain.states.shape[0] >= m else chain.states
        samples.append(kept)
        ids.append(np.full(kept.shape[0], i))
    return PosteriorEstimate(
        kind="ep", samples=np.vstack(samples), trajectory_ids=np.concatenate(ids),
        metadata={"K": k, "M": m, "mode": "feature"},
    )


# ---------------------------------------------------------------------------
# comparison metrics
# ---------------------------------------------------------------------------


def tv_distance_grid(est_a: PosteriorEstimate, est_b: PosteriorEstimate):
    """Total variation between two densities on the same grid."""
    if not (est_a.is_grid and est_b.is_grid):
        raise InputError("both estimates must be grid densities")
    w = trapezoid_weights(est_a.grid_axes)
    return float(0.5 * np.sum(w * np.abs(est_a.density - est_b.density)))


def tv_samples_vs_grid(samples, grid_est: PosteriorEstimate, n_bins=64):
    """Binned total variation between a sample set and a 1-D grid density."""
    x = grid_est.grid_axes[0]
    edges = np.linspace(x[0], x[-1], n_bins + 1)
    counts, _ = np.histogram(samples[:, 0], bins=edges)
    f = counts / counts.sum()
    # grid density mass per bin by trapezoid on a fine interpolation
    fine = np.linspace(x[0], x[-1], 8 * len(x))
    dens_f = np.interp(fine, x, grid_est.density)
    p = np.empty(n_bins)
    for b in range(n_bins):
        mask = (fine >= edges[b]) & (fine <= edges[b + 1])
        p[b] = np.trapezoid(dens_f[mask], fine[mask])
    p /= p.sum()
    return float(0.5 * np.sum(np.abs(p - f)))
