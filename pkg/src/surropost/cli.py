"""Command-line driver.

Loads a JSON experiment config, runs fits, posterior estimations, design
campaigns, ground-truth dumps, the verification battery, and figure
rendering, and writes CSV/JSON artifacts. All numeric output uses 17
significant digits so downstream re-checks are exact.

Exit codes: 0 success, 1 runtime failure, 2 config error, 3 verification
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import gp as gpmod
from .active import ALConfig, TemperSchedule, run_active_learning
from .estimators import (
    SurrogatePosterior,
    estimate_on_grid,
    sample_ep,
    tv_distance_grid,
    tv_samples_vs_grid,
)
from .exceptions import ConfigError, SurropostError
from .problems import (
    ForwardModelTarget,
    LogLikelihoodTarget,
    grid_posterior_oracle,
    make_grid,
    noisy_loglik_estimate,
    trapezoid_weights,
)
from .testbeds import get_builtin
from .verify import run_verification_battery

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# numeric formatting: round-trippable 17-significant-digit decimals
# ---------------------------------------------------------------------------


def fmt17(x):
    return "%.17g" % float(x)


def dumps17(obj, indent=0):
    """JSON text with floats rendered at 17 significant digits."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}{json.dumps(str(k))}: {dumps17(v, indent + 1)}'
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        obj = list(np.asarray(obj).tolist()) if isinstance(obj, np.ndarray) else list(obj)
        if not obj:
            return "[]"
        items = [f"{inner}{dumps17(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            return json.dumps(None)
        return fmt17(obj)
    return json.dumps(obj)


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps17(obj) + "\n")


def write_csv(path, header, rows):
    """Comma-delimited, header row, UTF-8, LF line endings, 17g numbers."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(
                fmt17(v) if isinstance(v, (float, np.floating)) else str(v)
                for v in row) + "\n")


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------


def _get(d, key, path, required=False, default=None):
    if key not in d:
        if required:
            raise ConfigError(f"missing required config field {path}.{key}")
        return default
    return d[key]


def load_config(path, seed_override=None, out_override=None):
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON near line {e.lineno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    if seed_override is not None:
        raw["seed"] = seed_override
    if out_override is not None:
        raw["out"] = out_override
    if "seed" not in raw:
        raise ConfigError("missing required config field seed (no wall-clock default)")
    if not isinstance(raw["seed"], int):
        raise ConfigError("config field seed must be an integer")
    return raw


def resolve_problem(cfg):
    spec = _get(cfg, "problem", "", required=True)
    if isinstance(spec, dict) and "path" in spec:
        with open(spec["path"], encoding="utf-8") as f:
            spec = json.load(f)
    if isinstance(spec, dict):
        name = _get(spec, "builtin", "problem", required=True)
        kwargs = dict(_get(spec, "kwargs", "problem", default={}))
    else:
        name, kwargs = spec, {}
    target = cfg.get("target")
    if target is not None and name != "pm-gaussian-toy":
        kwargs.setdefault("target", target)
    return get_builtin(name, **kwargs)


def _eval_target(problem, theta, rng):
    tk = problem.target_kind
    if isinstance(tk, ForwardModelTarget):
        val = problem.forward_model(np.asarray(theta))
        problem.ledger.record(1, "forward-model")
        return np.atleast_1d(val)
    if isinstance(tk, LogLikelihoodTarget):
        return float(problem.exact_loglik(np.atleast_2d(theta))[0])
    return noisy_loglik_estimate(np.atleast_1d(theta), problem, rng).value


def fit_emulator(problem, cfg):
    """Prior design + hyperparameter-tuned GP fit, per the emulator settings."""
    em_cfg = cfg.get("emulator", {})
    n_design = int(_get(em_cfg, "n_design", "emulator", default=8))
    mean_family = _get(em_cfg, "mean_family", "emulator", default="constant")
    fit_noise = bool(_get(em_cfg, "fit_noise", "emulator",
                          default=not isinstance(problem.target_kind,
                                                 (ForwardModelTarget, LogLikelihoodTarget))))
    rng = np.random.default_rng(cfg["seed"])
    x = problem.prior.sample(n_design, rng)
    responses = [_eval_target(problem, th, rng) for th in x]
    if isinstance(problem.target_kind, ForwardModelTarget):
        y = np.vstack(responses)
        kernels, means, nv = [], [], 0.0
        for i in range(y.shape[1]):
            k, v, mfun = gpmod.optimize_hyperparameters(
                x, y[:, i], mean_family, seed=cfg["seed"] + i, fit_noise=fit_noise)
            kernels.append(k)
            means.append(mfun)
            nv = max(nv, v)
        return gpmod.fit_multi_output_gp(x, y, kernels, means, nv)
    y = np.asarray(responses, dtype=float)
    kern, nv, mfun = gpmod.optimize_hyperparameters(
        x, y, mean_family, seed=cfg["seed"], fit_noise=fit_noise)
    return gpmod.fit_gp(x, y, kern, mfun, nv)


def _emulator_dict(em):
    if isinstance(em, gpmod.MultiOutputGp):
        return {"outputs": [gpmod.emulator_to_dict(e) for e in em.emulators]}
    return gpmod.emulator_to_dict(em)


def _theta_cols(dim):
    return [f"theta_{d}" for d in range(dim)]


def _outdir(cfg):
    out = cfg.get("out", ".")
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fit(cfg):
    problem = resolve_problem(cfg)
    em = fit_emulator(problem, cfg)
    out = _outdir(cfg)
    write_json(os.path.join(out, "emulator.json"), _emulator_dict(em))
    scalars = em.emulators if isinstance(em, gpmod.MultiOutputGp) else [em]
    rows = []
    for out_idx, e in enumerate(scalars):
        loo_mean, loo_var, std_resid, log_score = gpmod.loo_diagnostics(e)
        for i in range(e.n_design):
            rows.append([i, out_idx, *e.design_inputs[i],
                         float(e.design_responses[i]), float(loo_mean[i]),
                         float(loo_var[i]), float(std_resid[i]), float(log_score[i])])
    dim = scalars[0].dim
    write_csv(os.path.join(out, "loo.csv"),
              ["index", "output", *_theta_cols(dim), "response", "loo_mean",
               "loo_variance", "standardized_residual", "log_score"], rows)
    write_json(os.path.join(out, "config.json"), cfg)
    return 0


def _oracle_for(problem, n_grid):
    if problem.dim > 2 or problem.forward_model is None:
        return None, None
    grid = make_grid(problem.prior, n_grid)
    return grid, grid_posterior_oracle(problem, grid)


def cmd_infer(cfg, check_normalization=False):
    problem = resolve_problem(cfg)
    est_cfg = cfg.get("estimator", {})
    kind = _get(est_cfg, "kind", "estimator", default="eup")
    n_grid = int(_get(est_cfg, "n_grid", "estimator", default=512))
    is_fwd = isinstance(problem.target_kind, ForwardModelTarget)
    if kind in ("quantile", "mode") and is_fwd:
        raise ConfigError(f"estimator.kind {kind!r} is defined for log-density targets only")
    if kind == "expected-loglik" and not is_fwd:
        raise ConfigError("estimator.kind 'expected-loglik' requires a forward-model target")

    em = fit_emulator(problem, cfg)
    sp = SurrogatePosterior(emulator=em, problem=problem)
    out = _outdir(cfg)
    dim = problem.dim

    grid, oracle_density = _oracle_for(problem, max(n_grid, 32) if dim == 1
                                       else min(max(n_grid, 32), 64))
    metrics = {}
    if kind == "ep":
        k = int(_get(est_cfg, "k", "estimator", default=64))
        m = int(_get(est_cfg, "m", "estimator", default=100))
        mode = _get(est_cfg, "mode", "estimator", default="grid")
        rng = np.random.default_rng(cfg["seed"] + 1)
        est = sample_ep(sp, k, m, rng, mode=mode, n_nodes=n_grid)
        rows = [[i, int(est.trajectory_ids[i]), *est.samples[i]]
                for i in range(est.samples.shape[0])]
        write_csv(os.path.join(out, "posterior.csv"),
                  ["draw", "trajectory", *_theta_cols(dim)], rows)
        if oracle_density is not None and dim == 1:
            from .estimators import PosteriorEstimate
            oracle = PosteriorEstimate(kind="oracle", grid_nodes=grid[0],
                                       grid_axes=grid[1], density=oracle_density)
            metrics["tv_to_oracle"] = tv_samples_vs_grid(est.samples, oracle)
        mean, var = est.moments()
    else:
        alpha = float(_get(est_cfg, "alpha", "estimator", default=0.9))
        est = estimate_on_grid(sp, kind, n_nodes=n_grid, alpha=alpha)
        rows = [[*est.grid_nodes[i], float(est.density[i])]
                for i in range(est.grid_nodes.shape[0])]
        write_csv(os.path.join(out, "posterior.csv"),
                  [*_theta_cols(dim), "density"], rows)
        if check_normalization:
            mass = float(np.sum(trapezoid_weights(est.grid_axes) * est.density))
            if abs(mass - 1.0) > 1e-6:
                logger.error("grid posterior mass %s deviates from 1", fmt17(mass))
                return 3
            metrics["grid_mass"] = mass
        if oracle_density is not None:
            from .estimators import PosteriorEstimate
            oracle = PosteriorEstimate(kind="oracle", grid_nodes=grid[0],
                                       grid_axes=grid[1], density=oracle_density)
            est_on_oracle_grid = estimate_on_grid(sp, kind, grid=grid, alpha=alpha)
            metrics["tv_to_oracle"] = tv_distance_grid(est_on_oracle_grid, oracle)
            o_mean, o_var = oracle.moments()
            metrics["oracle_mean"] = o_mean.tolist()
            metrics["oracle_variance"] = o_var.tolist()
        mean, var = est.moments()
    metrics["mean"] = np.atleast_1d(mean).tolist()
    metrics["variance"] = np.atleast_1d(var).tolist()
    metrics["estimator"] = kind
    write_json(os.path.join(out, "metrics.json"), metrics)
    write_json(os.path.join(out, "config.json"), cfg)
    return 0


def _al_config(cfg):
    a = cfg.get("active", {})
    n_rounds = int(_get(a, "n_rounds", "active", default=5))
    temper = None
    if _get(a, "tempering", "active", default=False):
        if n_rounds < 1:
            raise ConfigError("active.tempering requires active.n_rounds >= 1")
        temper = TemperSchedule.geometric(n_rounds)
    return ALConfig(
        n_init=int(_get(a, "n_init", "active", default=4)),
        n_rounds=n_rounds,
        batch_size=int(_get(a, "batch_size", "active", default=2)),
        seed=cfg["seed"],
        acquisition=_get(a, "acquisition", "active", default="ecu-var-ldens"),
        strategy=_get(a, "strategy", "active", default="kriging-believer"),
        cl_value=float(_get(a, "cl_value", "active", default=0.0)),
        estimator=_get(cfg.get("estimator", {}), "kind", "estimator", default="eup"),
        mix_weight=float(_get(a, "mix_weight", "active", default=0.5)),
        n_candidates=int(_get(a, "n_candidates", "active", default=256)),
        rho_size=int(_get(a, "rho_size", "active", default=64)),
        n_grid=int(_get(cfg.get("estimator", {}), "n_grid", "estimator", default=256)),
        tempering=temper,
        reoptimize_hyperparameters=bool(_get(a, "reoptimize", "active", default=True)),
        mean_family=_get(cfg.get("emulator", {}), "mean_family", "emulator",
                         default="constant"),
    )


def cmd_design(cfg):
    problem = resolve_problem(cfg)
    al = _al_config(cfg)
    out = _outdir(cfg)
    t0 = time.time()
    history = run_active_learning(problem, al)
    wall = time.time() - t0

    dim = problem.dim
    rows = []
    for rec in history.rounds:
        for i, th in enumerate(rec.batch):
            rows.append([rec.round_index, i, *th,
                         float("nan") if rec.acq_value is None else float(rec.acq_value),
                         float("nan") if rec.tv_to_oracle is None else float(rec.tv_to_oracle),
                         rec.cumulative_calls])
    write_csv(os.path.join(out, "rounds.csv"),
              ["round", "point_idx", *_theta_cols(dim), "acq_value",
               "tv_to_oracle", "cumulative_calls"], rows)
    for rec in history.rounds:
        write_json(os.path.join(out, f"emulator_round_{rec.round_index}.json"),
                   rec.emulator_snapshot)
    write_json(os.path.join(out, "emulator.json"),
               _emulator_dict(history.final_emulator))
    if history.final_estimate is not None and history.final_estimate.is_grid:
        est = history.final_estimate
        write_csv(os.path.join(out, "posterior.csv"),
                  [*_theta_cols(dim), "density"],
                  [[*est.grid_nodes[i], float(est.density[i])]
                   for i in range(est.grid_nodes.shape[0])])
    write_json(os.path.join(out, "summary.json"), {
        "final_tv": history.final_tv,
        "cumulative_calls": history.cumulative_calls,
        "n_rounds": len(history.rounds),
        "wall_time_s": wall,
    })
    write_json(os.path.join(out, "config.json"), cfg)
    return 0


def cmd_oracle(cfg):
    problem = resolve_problem(cfg)
    n_grid = int(_get(cfg.get("estimator", {}), "n_grid", "estimator", default=512))
    grid, density = _oracle_for(problem, max(n_grid, 32) if problem.dim == 1
                                else min(max(n_grid, 32), 64))
    if density is None:
        raise ConfigError("grid ground truth needs a deterministic target in D <= 2")
    out = _outdir(cfg)
    write_csv(os.path.join(out, "posterior.csv"),
              [*_theta_cols(problem.dim), "density"],
              [[*grid[0][i], float(density[i])] for i in range(grid[0].shape[0])])
    write_json(os.path.join(out, "config.json"), cfg)
    return 0


def cmd_verify(seed, out=None):
    report = run_verification_battery(seed=seed)
    text = dumps17(report)
    print(text)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "verify.json"), "w", encoding="utf-8",
                  newline="\n") as f:
            f.write(text + "\n")
    return 0 if report["pass"] else 3


def cmd_render(spec_path):
    from .figures import render
    render(spec_path)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _build_parser():
    p = argparse.ArgumentParser(prog="surropost",
                                description="surrogate-based posterior estimation")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("fit", "infer", "design", "oracle"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None)
        s.add_argument("--threads", type=int, default=None)
        if name == "infer":
            s.add_argument("--check-normalization", action="store_true")
    v = sub.add_parser("verify")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=None)
    v.add_argument("--threads", type=int, default=None)
    r = sub.add_parser("render")
    r.add_argument("--config", required=True, help="panel-spec JSON path")
    return p


def _setup_logging():
    level = os.environ.get("SURRO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _cap_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be at least 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        _cap_threads(getattr(args, "threads", None))
        if args.command == "verify":
            return cmd_verify(args.seed, args.out)
        if args.command == "render":
            return cmd_render(args.config)
        cfg = load_config(args.config, seed_override=args.seed,
                          out_override=args.out)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "infer":
            return cmd_infer(cfg, check_normalization=args.check_normalization)
        if args.command == "design":
            return cmd_design(cfg)
        if args.command == "oracle":
            return cmd_oracle(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except SurropostError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
