"""Figure rendering from CLI artifacts.

Reads the documented CSV/JSON outputs (posterior grids or samples, emulator
snapshots, acquisition sweeps) and renders three panel styles: pushforward
mean with credible bands, posterior-approximation overlays, and acquisition
curves with an argmin marker. Inputs are never modified.
"""
from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt   # noqa: E402
import numpy as np                # noqa: E402
from scipy.stats import norm      # noqa: E402

from . import gp as gpmod         # noqa: E402
from .exceptions import ConfigError, InputError   # noqa: E402


def _read_csv_columns(path):
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    cols = {}
    for i, name in enumerate(header):
        vals = [r[i] for r in rows]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals)
    return cols


def _require_column(cols, name, path):
    if name not in cols:
        raise InputError(f"{path} is missing required column '{name}'")
    return cols[name]


def _load_spec(spec):
    if isinstance(spec, dict):
        return spec
    with open(spec, encoding="utf-8") as f:
        return json.load(f)


def _load_scalar_emulator(path):
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    if "outputs" in d:
        d = d["outputs"][0]
    return gpmod.emulator_from_dict(d)


def _design_verticals(ax, design_points):
    for x in design_points:
        ax.axvline(float(x), color="gray", linestyle="--", linewidth=0.8, zorder=1)


def _render_pushforward(spec, ax):
    path = spec.get("emulator")
    if path is None:
        raise ConfigError("pushforward panel needs an 'emulator' input path")
    em = _load_scalar_emulator(path)
    if em.dim != 1:
        raise ConfigError("pushforward panel renders 1-D emulators only")
    g = spec.get("grid", {})
    lo = float(g.get("lo", em.design_inputs[:, 0].min()))
    hi = float(g.get("hi", em.design_inputs[:, 0].max()))
    n = int(g.get("n", 400))
    x = np.linspace(lo, hi, n)
    mean, var = gpmod.predict_mean_var(em, x[:, None])
    level = float(spec.get("band_level", 0.95))
    z = norm.ppf(0.5 + level / 2.0)
    band_lo = mean - z * np.sqrt(var)
    band_hi = mean + z * np.sqrt(var)
    ax.fill_between(x, band_lo, band_hi, color="magenta", alpha=0.2,
                    label=f"{100 * level:g}% band")
    ax.plot(x, mean, color="magenta", linewidth=1.5, label="mean")
    ax.plot(em.design_inputs[:, 0], em.design_responses, "k.", markersize=6)
    _design_verticals(ax, em.design_inputs[:, 0])
    ax.set_xlabel("theta_0")
    ax.legend(frameon=False)
    return {"grid": x, "mean": mean, "band_lo": band_lo, "band_hi": band_hi,
            "design_points": em.design_inputs[:, 0].copy()}


def _render_posterior_overlay(spec, ax):
    posteriors = spec.get("posteriors")
    if not posteriors:
        raise ConfigError("posterior-overlay panel needs a 'posteriors' list")
    curves = []
    for entry in posteriors:
        path = entry["path"] if isinstance(entry, dict) else entry
        label = entry.get("label", path) if isinstance(entry, dict) else path
        cols = _read_csv_columns(path)
        theta = _require_column(cols, "theta_0", path)
        if "density" in cols:
            ax.plot(theta, cols["density"], linewidth=1.4, label=label)
            curves.append({"path": path, "theta": theta, "density": cols["density"]})
        elif "draw" in cols:
            ax.hist(theta, bins=64, density=True, histtype="step", label=label)
            curves.append({"path": path, "samples": theta})
        else:
            raise InputError(f"{path} is missing required column 'density'")
    em_path = spec.get("emulator")
    design = None
    if em_path is not None:
        em = _load_scalar_emulator(em_path)
        design = em.design_inputs[:, 0].copy()
        _design_verticals(ax, design)
    ax.set_xlabel("theta_0")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    return {"curves": curves, "design_points": design}


def _render_acquisition(spec, ax):
    path = spec.get("acquisition_csv")
    if path is None:
        raise ConfigError("acquisition panel needs an 'acquisition_csv' input path")
    cols = _read_csv_columns(path)
    theta = _require_column(cols, "theta_0", path)
    acq = _require_column(cols, "acq_value", path)
    order = np.argsort(theta)
    theta, acq = theta[order], acq[order]
    ax.plot(theta, acq, color="C0", linewidth=1.4)
    i = int(np.argmin(acq))
    ax.plot(theta[i], acq[i], marker="*", color="C3", markersize=14, zorder=3)
    em_path = spec.get("emulator")
    if em_path is not None:
        em = _load_scalar_emulator(em_path)
        _design_verticals(ax, em.design_inputs[:, 0])
    ax.set_xlabel("theta_0")
    ax.set_ylabel("acquisition")
    return {"theta": theta, "acq": acq, "argmin_theta": float(theta[i]),
            "argmin_value": float(acq[i])}


_PANELS = {
    "pushforward": _render_pushforward,
    "posterior-overlay": _render_posterior_overlay,
    "acquisition": _render_acquisition,
}


def render(spec):
    """Render one panel from a spec (dict or JSON path); returns plotted data.

    The returned dict carries the arrays actually drawn (band edges, curves,
    argmin position) so callers can cross-check them against the inputs.
    """
    spec = _load_spec(spec)
    kind = spec.get("kind")
    if kind not in _PANELS:
        raise ConfigError(f"unknown panel kind {kind!r}; expected one of {sorted(_PANELS)}")
    output = spec.get("output")
    if not output:
        raise ConfigError("panel spec needs an 'output' image path")
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    try:
        result = _PANELS[kind](spec, ax)
        fig.tight_layout()
        fig.savefig(output, dpi=150)
    finally:
        plt.close(fig)
    result["output"] = output
    return result
