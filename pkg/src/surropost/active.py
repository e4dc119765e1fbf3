"""Acquisition functions and batch-sequential design loops.

Closed-form expected-conditional-variance criteria for both emulator targets,
max-variance and weighted integrated-variance criteria, greedy batch
heuristics (Kriging Believer / Constant Liar), surrogate-guided batch
sampling, geometric tempering of the target, and variance-threshold MCMC
refinement.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import gp as gpmod
from .estimators import (
    PosteriorEstimate,
    SurrogatePosterior,
    _log_expm1,
    _logdet,
    _sample_from_grid_density,
    estimate_on_grid,
    log_eup_fwd,
    log_eup_ldens,
    sample_ep,
    tv_distance_grid,
)
from .exceptions import InputError
from .problems import (
    ForwardModelTarget,
    InverseProblem,
    LogLikelihoodTarget,
    gaussian_loglik,
    grid_posterior_oracle,
    make_grid,
    noisy_loglik_estimate,
    trapezoid_weights,
)
from .samplers import MhConfig, rwmh

logger = logging.getLogger(__name__)

_LOG_MAX = np.log(np.finfo(float).max)


# ---------------------------------------------------------------------------
# rho measures (sample-average approximation of the outer integral)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RhoMeasure:
    """Discrete weighting measure over the parameter space."""

    points: np.ndarray    # (J, D)
    weights: np.ndarray   # (J,), nonnegative, sums to 1

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if pts.shape[0] < 1 or w.shape[0] != pts.shape[0]:
            raise InputError("rho needs J >= 1 points with matching weights")
        if np.any(w < 0):
            raise InputError("rho weights must be nonnegative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w / np.sum(w))


def rho_prior_samples(prior, j, rng):
    pts = prior.sample(j, rng)
    return RhoMeasure(points=pts, weights=np.full(j, 1.0 / j))


def rho_grid(prior, n_nodes):
    nodes, axes = make_grid(prior, n_nodes)
    return RhoMeasure(points=nodes, weights=trapezoid_weights(axes))


def eup_importance_weights(sp: SurrogatePosterior, points):
    """Self-normalized EUP weights for prior-sampled points.

    Proposal is the prior, so the weight is the EUP density over the prior
    density, i.e. exp of the emulated log-likelihood part alone.
    """
    log_eup = (log_eup_fwd(sp, points) if sp.is_forward else log_eup_ldens(sp, points))
    logw = log_eup - sp.log_prior(points)
    logw = logw - np.max(logw)
    w = np.exp(logw)
    w = w / w.sum()
    ess = 1.0 / np.sum(w**2)
    if ess < points.shape[0] / 10:
        logger.warning("EUP importance weights degenerate: ESS %.1f of %d", ess,
                       points.shape[0])
    if np.max(w) > 0.99:
        logger.warning("EUP weights: single node carries >99%% of the mass")
    return w


def rho_eup_weighted(sp: SurrogatePosterior, j, rng):
    pts = sp.problem.prior.sample(j, rng)
    return RhoMeasure(points=pts, weights=eup_importance_weights(sp, pts))


# ---------------------------------------------------------------------------
# acquisition functions (all minimized)
# ---------------------------------------------------------------------------


def acq_maxvar_ldens(sp: SurrogatePosterior, theta):
    """Negated pointwise variance of the log-normal pushforward.

    Computed in log domain; overflow yields -inf (most preferred) with a
    logged flag, consistent with the criterion's known instability.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    m, v = sp.gp_mean_var(theta)
    logvar = 2.0 * sp.log_prior(theta) + _log_expm1(v) + 2.0 * m + v
    out = np.empty(theta.shape[0])
    over = logvar > _LOG_MAX
    if np.any(over):
        logger.warning("max-variance acquisition overflowed at %d points", over.sum())
    out[over] = -np.inf
    out[~over] = -np.exp(logvar[~over])
    # zero-variance points carry no preference at all
    out[v == 0] = 0.0
    return out


def integrated_variance_ldens(sp: SurrogatePosterior, rho: RhoMeasure):
    """Current rho-weighted integrated variance of the pushforward density."""
    m, v = sp.gp_mean_var(rho.points)
    logvar = 2.0 * sp.log_prior(rho.points) + _log_expm1(v) + 2.0 * m + v
    ok = logvar <= _LOG_MAX
    return float(np.sum(rho.weights[ok] * np.exp(logvar[ok])))


def acq_ecu_var_ldens(sp: SurrogatePosterior, batch, rho: RhoMeasure):
    """Expected conditional variance after observing the batch, log-density target.

    Closed form: the conditional variance under the Kriging-Believer
    pseudo-response (predictive mean unchanged, variance reduced to the
    updated one) times the influence factor exp(2 (s2_N - s2_{N+B})).
    """
    if sp.is_forward:
        raise InputError("acq_ecu_var_ldens requires a log-density target")
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    m, v_n = sp.gp_mean_var(rho.points)
    v_nb = gpmod.conditional_variance(sp.emulator, batch, rho.points)
    v_nb = np.minimum(v_nb, v_n)
    logterm = (2.0 * sp.log_prior(rho.points) + 2.0 * m + v_nb
               + _log_expm1(v_nb) + 2.0 * (v_n - v_nb))
    ok = logterm <= _LOG_MAX
    skipped = int(np.sum(~ok & np.isfinite(logterm)))
    if skipped:
        logger.warning("ECU-variance (log-density): skipped %d overflowing nodes", skipped)
    return float(np.sum(rho.weights[ok] * np.exp(logterm[ok])))


def acq_ecu_var_fwd(sp: SurrogatePosterior, batch, rho: RhoMeasure):
    """Expected conditional variance after the batch, forward-model target.

    Two-term difference of Gaussian densities; the inner covariance
    Sigma_N - Sigma/2 is positive definite because the GP variance is
    nonnegative.
    """
    if not sp.is_forward:
        raise InputError("acq_ecu_var_fwd requires a forward-model target")
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    y = sp.problem.observation
    sig = sp.problem.noise_cov
    p = y.shape[0]
    m, v_n = sp.gp_mean_var(rho.points)                  # (J, P)
    v_nb = sp.emulator.conditional_variance(batch, rho.points)
    v_nb = np.minimum(v_nb, v_n)
    lp = sp.log_prior(rho.points)
    log_norm_sig = 0.5 * p * np.log(2.0) + 0.5 * _logdet(2 * np.pi * sig)
    total = 0.0
    for j in range(rho.points.shape[0]):
        if not np.isfinite(lp[j]):
            continue
        s_n = np.diag(v_n[j])
        s_nb = np.diag(v_nb[j])
        c1 = 0.5 * sig + s_n                             # Sigma_N - Sigma/2
        _assert_pd(c1)
        t1 = gaussian_loglik(m[j], y, c1) - log_norm_sig
        c2 = 0.5 * sig + s_n - 0.5 * s_nb                # Sigma_N - Sigma_{N+B}/2
        _assert_pd(c2)
        t2 = (gaussian_loglik(m[j], y, c2)
              - 0.5 * p * np.log(2.0) - 0.5 * _logdet(2 * np.pi * (sig + s_nb)))
        total += rho.weights[j] * np.exp(2.0 * lp[j]) * max(np.exp(t1) - np.exp(t2), 0.0)
    return float(total)


def _assert_pd(c):
    if np.any(np.linalg.eigvalsh(c) <= 0):
        raise InputError("inner ECU covariance lost positive definiteness")


def acq_weighted_ivar(sp: SurrogatePosterior, batch, rho: RhoMeasure):
    """Weighted one-step-ahead integrated GP variance (summed over outputs)."""
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if sp.is_forward:
        v_nb = sp.emulator.conditional_variance(batch, rho.points).sum(axis=1)
    else:
        v_nb = gpmod.conditional_variance(sp.emulator, batch, rho.points)
    return float(np.sum(rho.weights * v_nb))


ACQUISITIONS = {
    "max-var-ldens": lambda sp, batch, rho: float(
        np.min(acq_maxvar_ldens(sp, np.atleast_2d(batch)))
    ),
    "ecu-var-ldens": acq_ecu_var_ldens,
    "ecu-var-fwd": acq_ecu_var_fwd,
    "weighted-ivar": acq_weighted_ivar,
}


# ---------------------------------------------------------------------------
# batch optimization
# ---------------------------------------------------------------------------


def _impute_update(sp: SurrogatePosterior, point, strategy, cl_value):
    """Update the emulator with a pseudo-response at the chosen point."""
    point = np.atleast_2d(point)
    if sp.is_forward:
        if strategy == "kriging-believer":
            resp, _ = sp.emulator.predict_mean_var(point)
        else:
            resp = np.full((1, sp.emulator.n_outputs), cl_value)
        em = sp.emulator.update(point, resp)
    else:
        if strategy == "kriging-believer":
            resp = gpmod.predict_mean_var(sp.emulator, point)[0]
        else:
            resp = np.array([cl_value])
        em = gpmod.update_gp(sp.emulator, point, resp)
    return replace(sp, emulator=em)


def optimize_batch(acq_name, sp: SurrogatePosterior, batch_size, candidates,
                   rho: RhoMeasure, strategy="kriging-believer", cl_value=0.0):
    """Select a batch by exhaustive search (B=1) or greedy imputation (B>1).

    Candidates are scored one point at a time; between greedy picks the
    surrogate is updated with a pseudo-observation (Kriging Believer uses the
    predictive mean, Constant Liar a fixed constant). Ties, including
    multiple -inf acquisition values, break deterministically by candidate
    index. Returns ``(batch, acq_value_of_first_pick)``.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.shape[0] < batch_size:
        raise InputError("candidate set smaller than the batch size")
    acq = ACQUISITIONS[acq_name]
    chosen = []
    remaining = list(range(candidates.shape[0]))
    sp_work = sp
    first_val = None
    for b in range(batch_size):
        vals = np.array([acq(sp_work, candidates[i][None, :], rho) for i in remaining])
        pick = int(np.argmin(vals))
        if first_val is None:
            first_val = float(vals[pick])
        idx = remaining.pop(pick)
        chosen.append(candidates[idx])
        if b + 1 < batch_size and strategy in ("kriging-believer", "constant-liar"):
            sp_work = _impute_update(sp_work, candidates[idx], strategy, cl_value)
    return np.array(chosen), first_val


def sample_batch(posterior_estimate, prior, batch_size, mix_weight, rng,
                 existing_design=None, lengthscale=1.0):
    """Draw a batch from the prior-posterior mixture w*pihat + (1-w)*pi0.

    Points duplicating an existing noiseless design point are jittered by
    1e-6 of the lengthscale.
    """
    if not (0.0 <= mix_weight <= 1.0):
        raise InputError("mix_weight must lie in [0, 1]")
    out = np.empty((batch_size, prior.dim))
    for i in range(batch_size):
        if rng.uniform() < mix_weight:
            out[i] = _draw_from_estimate(posterior_estimate, rng)
        else:
            out[i] = prior.sample(1, rng)[0]
    if existing_design is not None and len(existing_design):
        design = np.atleast_2d(existing_design)
        for i in range(batch_size):
            while np.min(np.linalg.norm(design - out[i], axis=1)) < 1e-12:
                out[i] = out[i] + 1e-6 * lengthscale * rng.standard_normal(prior.dim)
    return out


def _draw_from_estimate(est: PosteriorEstimate, rng):
    if est.is_grid:
        return _sample_from_grid_density(est.grid_nodes, est.grid_axes,
                                         est.density, 1, rng)[0]
    if est.samples is None or est.samples.shape[0] == 0:
        raise InputError("posterior estimate has an empty sample reservoir")
    idx = rng.integers(est.samples.shape[0])
    return est.samples[idx]


# ---------------------------------------------------------------------------
# tempering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TemperSchedule:
    """Strictly increasing ladder from 0 to 1, one exponent per design round."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        if b[0] != 0.0 or b[-1] != 1.0 or np.any(np.diff(b) <= 0):
            raise InputError("ladder must run strictly from 0 to 1")
        object.__setattr__(self, "betas", b)

    @classmethod
    def geometric(cls, n_rounds):
        t = np.arange(n_rounds + 1, dtype=float)
        return cls(betas=(t / n_rounds) ** 2)


# ---------------------------------------------------------------------------
# the active learning loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ALConfig:
    """Settings for a batch-sequential design campaign."""

    n_init: int
    n_rounds: int
    batch_size: int
    seed: int
    acquisition: str = "ecu-var-ldens"       # or random / posterior-sample
    strategy: str = "kriging-believer"
    cl_value: float = 0.0
    estimator: str = "eup"
    mix_weight: float = 0.5
    n_candidates: int = 256
    rho_size: int = 64
    n_grid: int = 256
    tempering: TemperSchedule | None = None
    reoptimize_hyperparameters: bool = True
    mean_family: str = "constant"
    ep_k: int = 64
    ep_m: int = 64


@dataclass
class RoundRecord:
    round_index: int
    beta: float
    batch: np.ndarray
    responses: np.ndarray
    acq_value: float | None
    tv_to_oracle: float | None
    cumulative_calls: int
    emulator_snapshot: dict


@dataclass
class DesignHistory:
    """Per-round record of a design campaign."""

    problem_name: str
    config: ALConfig
    initial_inputs: np.ndarray
    initial_responses: np.ndarray
    initial_calls: int = 0
    rounds: list = field(default_factory=list)
    final_emulator: object = None
    final_estimate: PosteriorEstimate | None = None
    final_tv: float | None = None

    @property
    def cumulative_calls(self):
        if self.rounds:
            return self.rounds[-1].cumulative_calls
        return self.initial_calls


def _evaluate_target(problem: InverseProblem, theta, rng):
    """One target observation at theta; returns (value, calls_consumed)."""
    tk = problem.target_kind
    if isinstance(tk, ForwardModelTarget):
        val = problem.forward_model(np.asarray(theta))
        problem.ledger.record(1, "forward-model")
        return np.atleast_1d(val), 1
    if isinstance(tk, LogLikelihoodTarget):
        before = problem.ledger.total_calls
        val = float(problem.exact_loglik(np.atleast_2d(theta))[0])
        return val, problem.ledger.total_calls - before
    obs = noisy_loglik_estimate(np.atleast_1d(theta), problem, rng)
    return obs.value, obs.simulator_calls


def _fit_round_emulator(problem, inputs, responses, config, round_seed,
                        hypers=None):
    """Fit (and optionally re-tune) the emulator for one round."""
    is_fwd = isinstance(problem.target_kind, ForwardModelTarget)
    if is_fwd:
        resp = np.atleast_2d(np.asarray(responses, dtype=float))
        kernels, means, nv = [], [], 0.0
        for i in range(resp.shape[1]):
            k, v, mfun = gpmod.optimize_hyperparameters(
                inputs, resp[:, i], config.mean_family, seed=round_seed + i)
            kernels.append(k)
            means.append(mfun)
            nv = max(nv, v)
        em = gpmod.fit_multi_output_gp(inputs, resp, kernels, means, nv)
        return em, None
    resp = np.asarray(responses, dtype=float)
    if hypers is None or config.reoptimize_hyperparameters:
        kern, nv, mfun = gpmod.optimize_hyperparameters(
            inputs, resp, config.mean_family, seed=round_seed)
        hypers = (kern, nv, mfun)
    else:
        kern, nv, mfun = hypers
        em = gpmod.fit_gp(inputs, resp, kern, mfun, nv)
        return em, hypers
    em = gpmod.fit_gp(inputs, resp, kern, mfun, nv)
    return em, hypers


def _round_estimate(sp, config, grid):
    if sp.problem.dim > 2 or grid is None:
        return None
    if config.estimator == "ep":
        rng = np.random.default_rng(config.seed + 7)
        return sample_ep(sp, config.ep_k, config.ep_m, rng, mode="grid",
                         grid=grid)
    return estimate_on_grid(sp, config.estimator, grid=grid)


def run_active_learning(problem: InverseProblem, config: ALConfig) -> DesignHistory:
    """Batch-sequential design: init, fit, estimate, acquire, simulate, repeat.

    When tempering is enabled the round-t emulation target is the likelihood
    raised to beta_t, obtained by rescaling the stored raw responses; the
    final round (beta = 1) reproduces the untempered target exactly.
    """
    rng = np.random.default_rng(config.seed)
    is_fwd = isinstance(problem.target_kind, ForwardModelTarget)
    if config.tempering is not None and is_fwd:
        raise InputError("tempering applies to log-density targets only")
    betas = (config.tempering.betas if config.tempering is not None else None)
    if betas is not None and len(betas) != config.n_rounds + 1:
        raise InputError("temper ladder length must be n_rounds + 1")

    inputs = problem.prior.sample(config.n_init, rng)
    responses, calls = [], 0
    for th in inputs:
        val, c = _evaluate_target(problem, th, rng)
        responses.append(val)
        calls += c
    responses = (np.vstack(responses) if is_fwd else np.asarray(responses, float))

    oracle = None
    grid = None
    if problem.dim <= 2 and problem.forward_model is not None:
        # keep 2-D metric grids modest: the oracle runs the true model per node
        n_per_dim = (max(config.n_grid, 32) if problem.dim == 1
                     else min(max(config.n_grid, 32), 48))
        grid = make_grid(problem.prior, n_per_dim)
        oracle_density = grid_posterior_oracle(problem, grid)
        oracle = PosteriorEstimate(kind="grid-truth", grid_nodes=grid[0],
                                   grid_axes=grid[1], density=oracle_density)

    history = DesignHistory(
        problem_name=problem.name, config=config,
        initial_inputs=inputs, initial_responses=responses,
        initial_calls=calls,
    )
    hypers = None
    emulator = None
    for t in range(1, config.n_rounds + 1):
        beta = float(betas[t]) if betas is not None else 1.0
        resp_t = responses if (is_fwd or beta == 1.0) else beta * responses
        emulator, hypers = _fit_round_emulator(
            problem, inputs, resp_t, config, round_seed=config.seed + 1000 * t,
            hypers=hypers)
        sp = SurrogatePosterior(emulator=emulator, problem=problem)
        estimate = _round_estimate(sp, config, grid)
        tv = (tv_distance_grid(estimate, oracle)
              if (estimate is not None and estimate.is_grid and oracle is not None
                  and beta == 1.0) else None)

        round_rng = np.random.default_rng(np.random.SeedSequence([config.seed, t]))
        acq_value = None
        if config.acquisition == "random":
            batch = problem.prior.sample(config.batch_size, round_rng)
        elif config.acquisition == "posterior-sample":
            if estimate is None:
                raise InputError("posterior-sample acquisition needs a grid estimate")
            ls = (np.mean([k.lengthscales.mean() for k in _kernels_of(emulator)]))
            batch = sample_batch(estimate, problem.prior, config.batch_size,
                                 config.mix_weight, round_rng,
                                 existing_design=inputs, lengthscale=ls)
        else:
            rho = rho_prior_samples(problem.prior, config.rho_size, round_rng)
            candidates = problem.prior.sample(config.n_candidates, round_rng)
            batch, acq_value = optimize_batch(
                config.acquisition, sp, config.batch_size, candidates, rho,
                strategy=config.strategy, cl_value=config.cl_value)

        batch_resp, kept = [], []
        for th in batch:
            try:
                val, c = _evaluate_target(problem, th, rng)
            except Exception as e:    # noqa: BLE001 - simulator failures are logged
                logger.warning("dropping failed batch point %s: %s", th, e)
                continue
            calls += c
            batch_resp.append(val)
            kept.append(th)
        if kept:
            kept = np.array(kept)
            inputs = np.vstack([inputs, kept])
            add = np.vstack(batch_resp) if is_fwd else np.asarray(batch_resp, float)
            responses = (np.vstack([responses, add]) if is_fwd
                         else np.concatenate([responses, add]))

        history.rounds.append(RoundRecord(
            round_index=t, beta=beta,
            batch=np.array(kept) if len(kept) else np.empty((0, problem.dim)),
            responses=np.asarray(batch_resp, dtype=float),
            acq_value=acq_value, tv_to_oracle=tv, cumulative_calls=calls,
            emulator_snapshot=_snapshot(emulator),
        ))

    # final refit on the complete design (beta = 1: untempered target)
    emulator, _ = _fit_round_emulator(
        problem, inputs, responses, config,
        round_seed=config.seed + 1000 * (config.n_rounds + 1), hypers=hypers)
    history.final_emulator = emulator
    sp = SurrogatePosterior(emulator=emulator, problem=problem)
    estimate = _round_estimate(sp, config, grid)
    history.final_estimate = estimate
    if estimate is not None and estimate.is_grid and oracle is not None:
        history.final_tv = tv_distance_grid(estimate, oracle)
    return history


def _kernels_of(emulator):
    if isinstance(emulator, gpmod.MultiOutputGp):
        return [e.kernel for e in emulator.emulators]
    return [emulator.kernel]


def _snapshot(emulator):
    if isinstance(emulator, gpmod.MultiOutputGp):
        return {"outputs": [gpmod.emulator_to_dict(e) for e in emulator.emulators]}
    return gpmod.emulator_to_dict(emulator)


# ---------------------------------------------------------------------------
# MCMC with variance-threshold design refinement
# ---------------------------------------------------------------------------


def mh_with_refinement(problem: InverseProblem, sp: SurrogatePosterior,
                       variance_threshold, budget, config: MhConfig):
    """Plug-in RWMH that refines the emulator at uncertain proposals.

    When the predictive variance at a proposal exceeds the threshold and
    budget remains, the true target is evaluated there, the GP is updated,
    and the acceptance is recomputed with the refreshed emulator. After the
    budget is exhausted the chain continues on the fixed surrogate.
    """
    if sp.is_forward:
        raise InputError("refinement sampler requires a log-density emulator")
    state = {"gp": sp.emulator, "points": [], "values": [], "calls": 0}

    def make_logdens(gp):
        def logdens(theta):
            lp = problem.prior.log_density(theta)
            m, _ = gpmod.predict_mean_var(gp, theta)
            return lp + m
        return logdens

    def hook(prop):
        if len(state["points"]) >= budget:
            return None
        _, var = gpmod.predict_mean_var(state["gp"], prop[None, :])
        if var[0] <= variance_threshold:
            return None
        d = np.min(np.linalg.norm(state["gp"].design_inputs - prop, axis=1))
        if d < 1e-10:
            return None
        before = problem.ledger.total_calls
        val = float(problem.exact_loglik(prop[None, :])[0])
        state["calls"] += problem.ledger.total_calls - before
        state["gp"] = gpmod.update_gp(state["gp"], prop[None, :], [val])
        state["points"].append(prop.copy())
        state["values"].append(val)
        return make_logdens(state["gp"])

    chain = rwmh(make_logdens(state["gp"]), problem.prior, config,
                 refine_hook=hook if np.isfinite(variance_threshold) else None)
    history = DesignHistory(
        problem_name=problem.name, config=None,
        initial_inputs=sp.emulator.design_inputs,
        initial_responses=sp.emulator.design_responses,
    )
    for i, (p, v) in enumerate(zip(state["points"], state["values"])):
        history.rounds.append(RoundRecord(
            round_index=i + 1, beta=1.0, batch=p[None, :],
            responses=np.array([v]), acq_value=None, tv_to_oracle=None,
            cumulative_calls=i + 1, emulator_snapshot={},
        ))
    history.final_emulator = state["gp"]
    return chain, history
