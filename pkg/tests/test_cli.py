"""CLI driver: config handling, artifact formats, exit codes, determinism."""
import csv
import json
import os

import numpy as np
import pytest

from surropost.cli import dumps17, fmt17, load_config, main, resolve_problem
from surropost.exceptions import ConfigError


def _write_cfg(path, cfg):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f)
    return str(path)


def _read_csv(path):
    with open(path, encoding="utf-8") as f:
        return list(csv.DictReader(f))


BASE = {"problem": "conjugate-gaussian-1d", "seed": 0,
        "emulator": {"n_design": 8},
        "estimator": {"kind": "eup", "n_grid": 128}}


class TestFormatting:
    def test_fmt17_round_trips_doubles(self, rng):
        for x in rng.standard_normal(200):
            assert float(fmt17(x)) == x
        assert float(fmt17(0.1)) == 0.1

    def test_dumps17_is_valid_json(self):
        obj = {"a": [1, 2.5, None, True], "b": {"c": np.float64(1.0 / 3.0)}}
        parsed = json.loads(dumps17(obj))
        assert parsed["b"]["c"] == 1.0 / 3.0

    def test_dumps17_nonfinite_becomes_null(self):
        parsed = json.loads(dumps17({"x": float("nan"), "y": float("inf")}))
        assert parsed["x"] is None and parsed["y"] is None

    def test_dumps17_numpy_arrays(self):
        parsed = json.loads(dumps17({"v": np.array([1.5, 2.5])}))
        assert parsed["v"] == [1.5, 2.5]


class TestConfigLoading:
    def test_missing_seed_rejected(self, tmp_path):
        p = _write_cfg(tmp_path / "c.json", {"problem": "bimodal-1d"})
        with pytest.raises(ConfigError, match="seed"):
            load_config(p)

    def test_seed_override(self, tmp_path):
        p = _write_cfg(tmp_path / "c.json", {"problem": "bimodal-1d", "seed": 1})
        assert load_config(p, seed_override=9)["seed"] == 9

    def test_invalid_json_names_the_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n "seed": 1,\n oops\n}')
        with pytest.raises(ConfigError, match="line 3"):
            load_config(str(p))

    def test_non_integer_seed_rejected(self, tmp_path):
        p = _write_cfg(tmp_path / "c.json", {"problem": "bimodal-1d", "seed": 1.5})
        with pytest.raises(ConfigError):
            load_config(p)

    def test_problem_from_json_file(self, tmp_path):
        spec = tmp_path / "prob.json"
        spec.write_text(json.dumps({"builtin": "pm-gaussian-toy",
                                    "kwargs": {"replicates": 3}}))
        problem = resolve_problem({"problem": {"path": str(spec)}, "seed": 0})
        assert problem.name == "pm-gaussian-toy"
        assert problem.target_kind.replicates == 3

    def test_unknown_problem_is_config_error(self):
        with pytest.raises(ConfigError):
            resolve_problem({"problem": "not-a-problem", "seed": 0})


class TestFitCommand:
    def test_artifacts_and_loo_schema(self, tmp_path):
        cfg = dict(BASE, out=str(tmp_path))
        p = _write_cfg(tmp_path / "c.json", cfg)
        assert main(["fit", "--config", p]) == 0
        em = json.loads((tmp_path / "emulator.json").read_text())
        assert len(em["design_inputs"]) == 8
        rows = _read_csv(tmp_path / "loo.csv")
        assert len(rows) == 8
        assert set(rows[0]) == {"index", "output", "theta_0", "response",
                                "loo_mean", "loo_variance",
                                "standardized_residual", "log_score"}
        # every numeric survives a parse round trip
        float(rows[0]["loo_mean"])

    def test_emulator_reloads_and_predicts(self, tmp_path):
        from surropost import gp as gpmod
        cfg = dict(BASE, out=str(tmp_path))
        p = _write_cfg(tmp_path / "c.json", cfg)
        main(["fit", "--config", p])
        gp = gpmod.emulator_from_json((tmp_path / "emulator.json").read_text())
        m, _ = gpmod.predict_mean_var(gp, gp.design_inputs)
        assert np.max(np.abs(m - gp.design_responses)) <= 1e-4


class TestInferCommand:
    def test_grid_estimate_artifacts(self, tmp_path):
        cfg = dict(BASE, out=str(tmp_path))
        p = _write_cfg(tmp_path / "c.json", cfg)
        assert main(["infer", "--config", p, "--check-normalization"]) == 0
        rows = _read_csv(tmp_path / "posterior.csv")
        assert set(rows[0]) == {"theta_0", "density"}
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["grid_mass"] == pytest.approx(1.0, abs=1e-9)
        assert metrics["tv_to_oracle"] <= 0.05
        m_true = 1.0 / (1.0 + 0.49) * 0.49 / 0.49   # conjugate mean = 0.671...
        assert abs(metrics["mean"][0] - metrics["oracle_mean"][0]) <= 0.05

    def test_ep_estimate_writes_samples(self, tmp_path):
        cfg = dict(BASE, out=str(tmp_path),
                   estimator={"kind": "ep", "k": 16, "m": 20, "n_grid": 128})
        p = _write_cfg(tmp_path / "c.json", cfg)
        assert main(["infer", "--config", p]) == 0
        rows = _read_csv(tmp_path / "posterior.csv")
        assert len(rows) == 16 * 20
        assert set(rows[0]) == {"draw", "trajectory", "theta_0"}

    def test_estimator_target_mismatch_exit_2(self, tmp_path):
        cfg = dict(BASE, out=str(tmp_path), target="forward-model",
                   estimator={"kind": "quantile"})
        p = _write_cfg(tmp_path / "c.json", cfg)
        assert main(["infer", "--config", p]) == 2

    def test_quantile_median_matches_plugin(self, tmp_path):
        out_q = tmp_path / "q"
        out_p = tmp_path / "p"
        pq = _write_cfg(tmp_path / "q.json", dict(
            BASE, out=str(out_q),
            estimator={"kind": "quantile", "alpha": 0.5, "n_grid": 128}))
        pp = _write_cfg(tmp_path / "p.json", dict(
            BASE, out=str(out_p),
            estimator={"kind": "plug-in", "n_grid": 128}))
        assert main(["infer", "--config", pq]) == 0
        assert main(["infer", "--config", pp]) == 0
        dq = [float(r["density"]) for r in _read_csv(out_q / "posterior.csv")]
        dp = [float(r["density"]) for r in _read_csv(out_p / "posterior.csv")]
        assert np.max(np.abs(np.array(dq) - np.array(dp))) <= 1e-9


class TestDesignCommand:
    def test_rounds_and_summary(self, tmp_path):
        cfg = {"problem": "conjugate-gaussian-1d", "seed": 0, "out": str(tmp_path),
               "estimator": {"kind": "eup", "n_grid": 64},
               "active": {"n_init": 4, "n_rounds": 2, "batch_size": 2,
                          "n_candidates": 32, "rho_size": 16}}
        p = _write_cfg(tmp_path / "c.json", cfg)
        assert main(["design", "--config", p]) == 0
        rows = _read_csv(tmp_path / "rounds.csv")
        assert len(rows) == 4
        assert set(rows[0]) == {"round", "point_idx", "theta_0", "acq_value",
                                "tv_to_oracle", "cumulative_calls"}
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["cumulative_calls"] == 8
        assert summary["n_rounds"] == 2
        assert summary["final_tv"] <= 0.2
        assert (tmp_path / "emulator_round_1.json").exists()
        assert (tmp_path / "emulator_round_2.json").exists()
        assert (tmp_path / "posterior.csv").exists()

    def test_byte_reproducibility(self, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            cfg = {"problem": "bimodal-1d", "seed": 7, "out": str(out),
                   "estimator": {"kind": "eup", "n_grid": 64},
                   "active": {"n_init": 4, "n_rounds": 2, "batch_size": 1,
                              "n_candidates": 32, "rho_size": 16}}
            p = _write_cfg(tmp_path / f"{tag}.json", cfg)
            assert main(["design", "--config", p]) == 0
            outs.append(out)
        for name in ("rounds.csv", "posterior.csv", "emulator.json",
                     "emulator_round_1.json", "emulator_round_2.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        summaries = []
        for out in outs:
            s = json.loads((out / "summary.json").read_text())
            s.pop("wall_time_s")
            summaries.append(s)
        assert summaries[0] == summaries[1]


class TestOracleCommand:
    def test_oracle_density_artifact(self, tmp_path):
        cfg = dict(BASE, out=str(tmp_path))
        p = _write_cfg(tmp_path / "c.json", cfg)
        assert main(["oracle", "--config", p]) == 0
        rows = _read_csv(tmp_path / "posterior.csv")
        dens = np.array([float(r["density"]) for r in rows])
        x = np.array([float(r["theta_0"]) for r in rows])
        assert np.trapezoid(dens, x) == pytest.approx(1.0, abs=1e-6)

    def test_oracle_needs_deterministic_target(self, tmp_path, monkeypatch):
        import surropost.cli as cli
        from surropost.problems import (
            InverseProblem,
            NoisyABCTarget,
            Prior,
        )

        sim_only = InverseProblem(
            prior=Prior("uniform", lo=[0.0], hi=[1.0]),
            observation=[0.0], noise_cov=[[1.0]],
            target_kind=NoisyABCTarget(replicates=5, epsilon=0.5),
            simulator=lambda th, rng: np.atleast_1d(th[0]),
        )
        monkeypatch.setattr(cli, "resolve_problem", lambda cfg: sim_only)
        cfg = {"problem": "ignored", "seed": 0, "out": str(tmp_path)}
        p = _write_cfg(tmp_path / "c.json", cfg)
        assert main(["oracle", "--config", p]) == 2


class TestVerifyCommand:
    def test_verify_passes_and_writes_report(self, tmp_path, capsys):
        assert main(["verify", "--seed", "0", "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "verify.json").read_text())
        assert report["pass"] is True
        assert len(report["items"]) == 5
        printed = json.loads(capsys.readouterr().out)
        assert printed == report

    def test_corrupted_closed_form_fails_battery(self):
        from surropost.active import acq_ecu_var_ldens
        from surropost.verify import check_ecu_ldens

        def corrupted(sp, batch, rho):
            return 1.07 * acq_ecu_var_ldens(sp, batch, rho)

        item = check_ecu_ldens(2, n_instances=10, ecu_ldens_fn=corrupted)
        assert not item["pass"]


class TestExitCodes:
    def test_missing_config_file_exit_2(self, tmp_path):
        assert main(["fit", "--config", str(tmp_path / "absent.json")]) == 2

    def test_bad_threads_exit_2(self, tmp_path):
        p = _write_cfg(tmp_path / "c.json", dict(BASE, out=str(tmp_path)))
        assert main(["fit", "--config", p, "--threads", "0"]) == 2

    def test_threads_env_propagation(self, tmp_path):
        p = _write_cfg(tmp_path / "c.json", dict(BASE, out=str(tmp_path)))
        main(["fit", "--config", p, "--threads", "2"])
        assert os.environ["OMP_NUM_THREADS"] == "2"

    def test_out_override_cli_flag(self, tmp_path):
        target = tmp_path / "elsewhere"
        p = _write_cfg(tmp_path / "c.json", dict(BASE))
        assert main(["fit", "--config", p, "--out", str(target)]) == 0
        assert (target / "emulator.json").exists()
