"""MCMC machinery: adaptive random-walk Metropolis-Hastings, pseudo-marginal
MH with estimate recycling, and chain diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import InputError
from .problems import Prior

_INIT_REDRAWS = 100


@dataclass(frozen=True)
class MhConfig:
    """Random-walk MH settings.

    The proposal scale is adapted toward the target acceptance rate during
    burn-in only (Robbins-Monro on the log scale, batched per adaptation
    window) and frozen afterwards, preserving detailed balance for the
    retained states.
    """

    n_steps: int
    seed: int
    burn_in: float = 0.25
    initial_scale: np.ndarray | float | None = None
    adaptation_window: int = 50
    target_acceptance: float | None = None    # default 0.44 (D=1) / 0.234 (D>1)

    def __post_init__(self):
        if not (0.0 < self.burn_in < 1.0):
            raise InputError("burn_in fraction must lie in (0, 1)")
        if self.n_steps < 1:
            raise InputError("n_steps must be positive")

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class Chain:
    """Post-burn-in states with per-step bookkeeping over the whole run."""

    states: np.ndarray          # (T_kept, D)
    log_density: np.ndarray     # (T_kept,)
    accepted: np.ndarray        # (T_total,) indicator
    scale_history: np.ndarray   # per adaptation window
    n_burn_in: int
    auto_rejects: int = 0       # pseudo-marginal -inf proposals

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted))


def _reflect(x, lo, hi):
    """Fold a proposal back into the box by reflection at the boundaries."""
    span = hi - lo
    y = np.mod(x - lo, 2.0 * span)
    return lo + np.where(y > span, 2.0 * span - y, y)


def _resolve_config(config: MhConfig, dim):
    target = config.target_acceptance
    if target is None:
        target = 0.44 if dim == 1 else 0.234
    scale = config.initial_scale
    return target, scale


def _draw_initial(log_density, prior, rng):
    for _ in range(_INIT_REDRAWS):
        theta = prior.sample(1, rng)[0]
        ld = float(np.ravel(log_density(theta[None, :]))[0])
        if np.isfinite(ld):
            return theta, ld
    raise InputError("could not find a finite-density initial state from the prior")


def rwmh(log_density, prior_support: Prior, config: MhConfig,
         refine_hook=None) -> Chain:
    """Adaptive random-walk Metropolis-Hastings on a log-density callable.

    Gaussian proposals are reflected at the prior box boundaries. The
    optional ``refine_hook(theta_proposal)`` may swap in a refreshed
    log-density (returning a new callable or None) without consuming any
    randomness; it exists for surrogate-refinement samplers.
    """
    rng = np.random.default_rng(config.seed)
    dim = prior_support.dim
    target, scale0 = _resolve_config(config, dim)
    scale = (np.full(dim, 0.1) * (prior_support.hi - prior_support.lo)
             if scale0 is None else np.broadcast_to(np.atleast_1d(scale0), (dim,)).astype(float).copy())
    if np.any(scale <= 0):
        raise InputError("proposal scales must be positive")

    theta, ld = _draw_initial(log_density, prior_support, rng)
    t_total = config.n_steps
    n_burn = int(np.floor(config.burn_in * t_total))
    z = rng.standard_normal((t_total, dim))
    u = np.log(rng.uniform(size=t_total))

    states = np.empty((t_total, dim))
    lds = np.empty(t_total)
    accepted = np.zeros(t_total, dtype=bool)
    scale_hist = [scale.copy()]
    window_acc = 0

    for t in range(t_total):
        prop = _reflect(theta + scale * z[t], prior_support.lo, prior_support.hi)
        if refine_hook is not None:
            new_logdens = refine_hook(prop)
            if new_logdens is not None:
                log_density = new_logdens
                ld = float(np.ravel(log_density(theta[None, :]))[0])
        ld_prop = float(np.ravel(log_density(prop[None, :]))[0])
        if u[t] < ld_prop - ld:
            theta, ld = prop, ld_prop
            accepted[t] = True
            window_acc += 1
        states[t] = theta
        lds[t] = ld
        if t < n_burn and (t + 1) % config.adaptation_window == 0:
            rate = window_acc / config.adaptation_window
            scale = _clip_scale(scale * np.exp(rate - target), prior_support)
            scale_hist.append(scale.copy())
            window_acc = 0

    return Chain(states=states[n_burn:], log_density=lds[n_burn:],
                 accepted=accepted, scale_history=np.array(scale_hist),
                 n_burn_in=n_burn)


def _clip_scale(scale, prior_support):
    """Keep the adapted proposal scale inside a sane range for the box.

    Scales beyond the box span add nothing under reflection, and runaway
    growth (e.g. on a flat target that accepts everything) would destroy the
    reflection arithmetic.
    """
    span = prior_support.hi - prior_support.lo
    return np.clip(scale, 1e-12 * span, span)


def pm_mh(noisy_loglik_estimator, log_prior, prior_support: Prior,
          config: MhConfig) -> Chain:
    """Pseudo-marginal MH: recycle the stored log-estimate at the current state.

    ``noisy_loglik_estimator(theta, rng)`` must return an unbiased estimate of
    the likelihood (on the likelihood scale) in log form. The stored estimate
    at the current state is never re-evaluated; a fresh estimate is drawn only
    at the proposal, and replaces the stored one on acceptance. A -inf
    proposal estimate auto-rejects.
    """
    chain_rng = np.random.default_rng(config.seed)
    est_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xE57]))
    dim = prior_support.dim
    target, scale0 = _resolve_config(config, dim)
    scale = (np.full(dim, 0.1) * (prior_support.hi - prior_support.lo)
             if scale0 is None else np.broadcast_to(np.atleast_1d(scale0), (dim,)).astype(float).copy())

    theta = None
    for _ in range(_INIT_REDRAWS):
        cand = prior_support.sample(1, chain_rng)[0]
        lp = float(np.ravel(log_prior(cand[None, :]))[0])
        est = float(noisy_loglik_estimator(cand, est_rng))
        if np.isfinite(lp + est):
            theta, cur_lp, cur_est = cand, lp, est
            break
    if theta is None:
        raise InputError("could not initialize pseudo-marginal chain")

    t_total = config.n_steps
    n_burn = int(np.floor(config.burn_in * t_total))
    z = chain_rng.standard_normal((t_total, dim))
    u = np.log(chain_rng.uniform(size=t_total))

    states = np.empty((t_total, dim))
    lds = np.empty(t_total)
    accepted = np.zeros(t_total, dtype=bool)
    scale_hist = [scale.copy()]
    window_acc = 0
    auto_rejects = 0

    for t in range(t_total):
        prop = _reflect(theta + scale * z[t], prior_support.lo, prior_support.hi)
        lp_prop = float(np.ravel(log_prior(prop[None, :]))[0])
        est_prop = float(noisy_loglik_estimator(prop, est_rng))
        if not np.isfinite(est_prop):
            auto_rejects += 1
        elif u[t] < (lp_prop + est_prop) - (cur_lp + cur_est):
            theta, cur_lp, cur_est = prop, lp_prop, est_prop
            accepted[t] = True
            window_acc += 1
        states[t] = theta
        lds[t] = cur_lp + cur_est
        if t < n_burn and (t + 1) % config.adaptation_window == 0:
            rate = window_acc / config.adaptation_window
            scale = _clip_scale(scale * np.exp(rate - target), prior_support)
            scale_hist.append(scale.copy())
            window_acc = 0

    return Chain(states=states[n_burn:], log_density=lds[n_burn:],
                 accepted=accepted, scale_history=np.array(scale_hist),
                 n_burn_in=n_burn, auto_rejects=auto_rejects)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def effective_sample_size(x):
    """Autocorrelation-based ESS of a 1-D series (Geyer initial positive pairs)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    x = x - x.mean()
    var = np.dot(x, x) / n
    if var == 0:
        return float(n)
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(f * np.conj(f))[:n].real / (n * var)
    # sum autocorrelations over consecutive pairs while the pair sum is positive
    rho_sum = 0.0
    t = 1
    while t + 1 < n:
        pair = acf[t] + acf[t + 1]
        if pair < 0:
            break
        rho_sum += pair
        t += 2
    return float(n / (1.0 + 2.0 * rho_sum))


def split_rhat(chains):
    """Split-R-hat over a set of equal-length 1-D chains."""
    half = min(c.shape[0] for c in chains) // 2
    segs = []
    for c in chains:
        segs.append(c[:half])
        segs.append(c[half:2 * half])
    segs = np.asarray(segs, dtype=float)
    m, n = segs.shape
    means = segs.mean(axis=1)
    w = segs.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return np.inf if b > 0 else 1.0
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def chain_diagnostics(chains):
    """ESS, split-R-hat, and acceptance rate for a collection of chains.

    Accepts Chain objects or raw (T, D) arrays; at least two chains are
    required for R-hat and all chains must have equal length.
    """
    if len(chains) < 2:
        raise InputError("R-hat needs at least 2 chains")
    arrays = [c.states if isinstance(c, Chain) else np.atleast_2d(np.asarray(c, float))
              for c in chains]
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) != 1:
        raise InputError("chains must have equal length")
    dim = arrays[0].shape[1]
    ess = sum(effective_sample_size(a[:, d]) for a in arrays for d in range(dim)) / dim
    rhat = max(split_rhat([a[:, d] for a in arrays]) for d in range(dim))
    acc = [c.acceptance_rate for c in chains if isinstance(c, Chain)]
    return {
        "ess": float(ess),
        "split_rhat": float(rhat),
        "acceptance_rate": float(np.mean(acc)) if acc else float("nan"),
    }
