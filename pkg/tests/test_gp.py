"""GP regression core: conditioning, updates, sampling, fitting, LOO."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surropost import gp as gpmod
from surropost.exceptions import (
    DegenerateUpdateError,
    InputError,
    UnsupportedKernelError,
)
from surropost.gp import (
    Kernel,
    MeanFunction,
    conditional_variance,
    dist_of_updated_mean,
    emulator_from_json,
    emulator_to_json,
    fit_gp,
    fit_multi_output_gp,
    loo_diagnostics,
    optimize_hyperparameters,
    predict,
    predict_mean_var,
    sample_marginal,
    sample_trajectory,
    update_gp,
)

from conftest import small_gp


def _se_kernel():
    return Kernel(lengthscales=[0.8], signal_variance=1.5)


class TestKernel:
    def test_positive_parameters_required(self):
        with pytest.raises(InputError):
            Kernel(lengthscales=[-1.0], signal_variance=1.0)
        with pytest.raises(InputError):
            Kernel(lengthscales=[1.0], signal_variance=0.0)

    def test_unknown_family_rejected(self):
        with pytest.raises(UnsupportedKernelError):
            Kernel(lengthscales=[1.0], signal_variance=1.0, family="matern")

    def test_default_jitter_scales_with_signal_variance(self):
        k = Kernel(lengthscales=[1.0], signal_variance=4.0)
        assert k.jitter == pytest.approx(4e-10)

    def test_matrix_symmetric_psd(self, rng):
        k = _se_kernel()
        x = rng.uniform(-2, 2, (10, 1))
        K = k(x)
        assert np.allclose(K, K.T)
        assert np.min(np.linalg.eigvalsh(K)) > -1e-10


class TestFitAndPredict:
    def test_single_point_interpolation(self):
        gp = fit_gp([[0.0]], [3.0], _se_kernel(), MeanFunction("zero"), 0.0)
        m, v = predict_mean_var(gp, [[0.0]])
        assert abs(m[0] - 3.0) <= 1e-8
        assert v[0] <= 1e-8

    def test_noiseless_interpolation_at_all_design_points(self):
        gp = small_gp()
        m, v = predict_mean_var(gp, gp.design_inputs)
        assert np.max(np.abs(m - gp.design_responses)) <= 1e-8
        assert np.max(v) <= 1e-8

    def test_dense_inverse_oracle(self, rng):
        x = rng.uniform(-2, 2, (5, 1))
        y = rng.standard_normal(5)
        k = _se_kernel()
        gp = fit_gp(x, y, k, MeanFunction("zero"), 0.0)
        q = rng.uniform(-2, 2, (3, 1))
        pred = predict(gp, q)
        K = k(x) + k.jitter * np.eye(5)
        Kinv = np.linalg.inv(K)
        mean_oracle = k(q, x) @ Kinv @ y
        cov_oracle = k(q) - k(q, x) @ Kinv @ k(x, q)
        assert np.max(np.abs(pred.mean - mean_oracle)) <= 1e-8
        assert np.max(np.abs(pred.cov - cov_oracle)) <= 1e-8

    def test_chol_reconstructs_covariance(self):
        gp = small_gp(noise=0.01)
        K = gp.kernel(gp.design_inputs) + gp.noise_variance * np.eye(gp.n_design)
        rel = np.max(np.abs(gp.chol_K @ gp.chol_K.T - K)) / np.max(np.abs(K))
        assert rel <= 1e-8

    def test_prior_reversion_far_from_design(self):
        gp = small_gp()
        m, v = predict_mean_var(gp, [[40.0]])
        assert abs(m[0]) <= 1e-6
        assert abs(v[0] - gp.kernel.signal_variance) <= 1e-6

    def test_include_noise_adds_sigma2_to_diagonal(self):
        gp = small_gp(noise=0.05)
        q = np.array([[0.3], [1.1]])
        without = predict(gp, q, include_noise=False)
        with_n = predict(gp, q, include_noise=True)
        assert np.allclose(with_n.cov - without.cov, 0.05 * np.eye(2))

    def test_joint_marginal_consistency(self):
        gp = small_gp()
        q = np.array([[0.3], [1.1]])
        joint = predict(gp, q)
        singles = [predict(gp, q[i:i + 1]).cov[0, 0] for i in range(2)]
        assert np.max(np.abs(np.diag(joint.cov) - singles)) <= 1e-10

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(InputError):
            fit_gp([[0.0], [1.0]], [1.0], _se_kernel(), MeanFunction("zero"), 0.0)

    def test_noiseless_duplicates_rejected(self):
        with pytest.raises(DegenerateUpdateError):
            fit_gp([[0.0], [0.0]], [1.0, 1.0], _se_kernel(), MeanFunction("zero"), 0.0)

    def test_negative_noise_rejected(self):
        with pytest.raises(InputError):
            fit_gp([[0.0]], [1.0], _se_kernel(), MeanFunction("zero"), -0.1)


class TestUpdate:
    def test_empty_update_returns_same_emulator(self):
        gp = small_gp()
        assert update_gp(gp, np.empty((0, 1)), []) is gp

    def test_update_matches_refit(self, rng):
        gp = small_gp()
        xb = np.array([[0.77]])
        yb = np.array([np.sin(1.3 * 0.77)])
        updated = update_gp(gp, xb, yb)
        refit = fit_gp(np.vstack([gp.design_inputs, xb]),
                       np.concatenate([gp.design_responses, yb]),
                       gp.kernel, gp.mean, gp.noise_variance)
        q = rng.uniform(-2, 2, (5, 1))
        mu, vu = predict_mean_var(updated, q)
        mr, vr = predict_mean_var(refit, q)
        assert np.max(np.abs(mu - mr)) <= 1e-8
        assert np.max(np.abs(vu - vr)) <= 1e-8

    def test_sequential_updates_order_invariant(self, rng):
        gp = small_gp()
        pts = np.array([[0.33], [-1.21]])
        vals = np.cos(pts[:, 0])
        one_shot = update_gp(gp, pts, vals)
        seq = update_gp(update_gp(gp, pts[:1], vals[:1]), pts[1:], vals[1:])
        q = rng.uniform(-2, 2, (5, 1))
        assert np.max(np.abs(predict_mean_var(one_shot, q)[0]
                             - predict_mean_var(seq, q)[0])) <= 1e-8
        assert np.max(np.abs(predict_mean_var(one_shot, q)[1]
                             - predict_mean_var(seq, q)[1])) <= 1e-8

    def test_duplicate_of_design_point_rejected_when_noiseless(self):
        gp = small_gp()
        with pytest.raises(DegenerateUpdateError):
            update_gp(gp, gp.design_inputs[:1], [0.0])


class TestConditionalVariance:
    def test_existing_design_point_adds_nothing(self):
        gp = small_gp()
        q = np.linspace(-2, 2, 40)[:, None]
        base = predict_mean_var(gp, q)[1]
        after = conditional_variance(gp, gp.design_inputs[2:3], q)
        assert np.max(np.abs(after - base)) <= 1e-8

    def test_query_inside_batch_interpolates(self):
        gp = small_gp()
        v = conditional_variance(gp, [[0.5]], [[0.5]])
        assert v[0] <= 1e-8

    def test_variance_never_increases(self, rng):
        gp = small_gp()
        q = np.linspace(-2, 2, 60)[:, None]
        base = predict_mean_var(gp, q)[1]
        for _ in range(10):
            batch = rng.uniform(-2, 2, (3, 1))
            after = conditional_variance(gp, batch, q)
            assert np.all(after <= base + 1e-10)

    def test_response_independence(self, rng):
        gp = small_gp(noise=1e-6)
        batch = np.array([[0.9], [-0.4]])
        q = rng.uniform(-2, 2, (7, 1))
        cv = conditional_variance(gp, batch, q)
        for dummy in ([0.0, 0.0], [123.0, -77.0]):
            v = predict_mean_var(update_gp(gp, batch, dummy), q)[1]
            assert np.max(np.abs(v - cv)) <= 1e-8


class TestUpdatedMeanLaw:
    def test_uninformative_far_batch(self):
        gp = small_gp()
        _, var = dist_of_updated_mean(gp, [[30.0]], [[0.0]])
        assert var <= 1e-6

    def test_full_revelation_at_query(self):
        gp = small_gp()
        theta = np.array([[0.37]])
        _, var = dist_of_updated_mean(gp, theta, theta)
        s2 = predict_mean_var(gp, theta)[1][0]
        assert abs(var - s2) <= 1e-8

    def test_monte_carlo_resampling_oracle(self, rng):
        gp = small_gp(noise=1e-4)
        batch = np.array([[0.6]])
        theta = np.array([[-0.2]])
        m_cf, v_cf = dist_of_updated_mean(gp, batch, theta)
        n = 100_000
        pred = predict(gp, np.vstack([theta, batch]))
        m_b = pred.mean[1]
        v_b = pred.cov[1, 1] + gp.noise_variance
        c = pred.cov[0, 1]
        yhat = m_b + np.sqrt(v_b) * rng.standard_normal(n)
        m_upd = pred.mean[0] + c * (yhat - m_b) / v_b
        se_mean = m_upd.std(ddof=1) / np.sqrt(n)
        sq = (m_upd - m_upd.mean()) ** 2
        se_var = sq.std(ddof=1) / np.sqrt(n)
        assert abs(m_upd.mean() - m_cf) <= 3 * se_mean
        assert abs(sq.mean() - v_cf) <= 3 * se_var


class TestSampling:
    def test_marginal_clt_bound(self, rng):
        gp = small_gp()
        theta = np.array([[0.4]])
        m, v = predict_mean_var(gp, theta)
        n = 100_000
        draws = sample_marginal(gp, theta, n, rng)[:, 0]
        assert abs(draws.mean() - m[0]) <= 4 * np.sqrt(v[0]) / np.sqrt(n) + 1e-4

    def test_zero_variance_point_draws_equal_response(self, rng):
        gp = small_gp()
        draws = sample_marginal(gp, gp.design_inputs[:1], 50, rng)
        assert np.max(np.abs(draws - gp.design_responses[0])) <= 1e-3

    def test_marginal_draws_seed_reproducible(self):
        gp = small_gp()
        q = np.array([[0.1], [1.4]])
        a = sample_marginal(gp, q, 10, np.random.default_rng(9))
        b = sample_marginal(gp, q, 10, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_grid_trajectory_hits_responses_at_design(self, rng):
        gp = small_gp()
        traj = sample_trajectory(gp, "grid", rng, grid=gp.design_inputs)
        assert np.max(np.abs(traj(gp.design_inputs) - gp.design_responses)) <= 1e-3

    def test_grid_trajectory_off_grid_rejected(self, rng):
        gp = small_gp()
        traj = sample_trajectory(gp, "grid", rng, grid=gp.design_inputs)
        with pytest.raises(InputError):
            traj([[0.123456]])

    def test_feature_trajectory_matches_marginals(self, rng):
        gp = small_gp(noise=1e-6)
        pts = np.array([[-1.5], [0.1], [1.7]])
        m, v = predict_mean_var(gp, pts)
        n = 10_000
        vals = np.empty((n, 3))
        for i in range(n):
            vals[i] = sample_trajectory(gp, "feature", rng, n_features=2048)(pts)
        scale = np.sqrt(gp.kernel.signal_variance)
        assert np.max(np.abs(vals.mean(0) - m)) / scale <= 0.05
        keep = v > 0.05 * gp.kernel.signal_variance
        assert np.max(np.abs(vals.var(0)[keep] - v[keep]) / v[keep]) <= 0.05

    def test_trajectory_is_a_fixed_function(self, rng):
        gp = small_gp()
        traj = sample_trajectory(gp, "feature", rng)
        theta = np.array([[0.77]])
        assert traj(theta)[0] == traj(theta)[0]

    def test_feature_mode_requires_supported_kernel(self, rng):
        gp = small_gp()
        object.__setattr__(gp.kernel, "family", "spectral")
        with pytest.raises(UnsupportedKernelError):
            sample_trajectory(gp, "feature", rng)


class TestHyperparameterFitting:
    def test_synthetic_lengthscale_recovery(self):
        ok = 0
        for seed in range(20):
            r = np.random.default_rng(seed)
            x = r.uniform(-3, 3, (40, 1))
            K = Kernel(lengthscales=[0.5], signal_variance=1.0)(x) + 1e-8 * np.eye(40)
            y = np.linalg.cholesky(K) @ r.standard_normal(40)
            kern, _, _ = optimize_hyperparameters(x, y, "zero", seed=seed)
            if 0.25 <= kern.lengthscales[0] <= 1.0:
                ok += 1
        assert ok >= 16

    def test_constant_responses_degenerate(self):
        r = np.random.default_rng(1)
        x = r.uniform(-2, 2, (10, 1))
        y = np.full(10, 2.5)
        kern, nv, _ = optimize_hyperparameters(x, y, "constant", seed=1)
        assert kern.signal_variance <= 1e-4 * 2.5 or nv >= kern.signal_variance

    def test_response_scaling_equivariance(self):
        r = np.random.default_rng(2)
        x = r.uniform(-3, 3, (30, 1))
        K = Kernel(lengthscales=[0.6], signal_variance=1.0)(x) + 1e-6 * np.eye(30)
        y = (np.linalg.cholesky(K) @ r.standard_normal(30)
             + 0.05 * r.standard_normal(30))
        k1, _, _ = optimize_hyperparameters(x, y, "zero", seed=2)
        k2, _, _ = optimize_hyperparameters(x, 2 * y, "zero", seed=2)
        assert k2.signal_variance / k1.signal_variance == pytest.approx(4.0, rel=0.05)
        assert k2.lengthscales[0] == pytest.approx(k1.lengthscales[0], rel=0.1)

    def test_seed_determinism(self):
        r = np.random.default_rng(3)
        x = r.uniform(-2, 2, (12, 1))
        y = np.sin(x[:, 0])
        a = optimize_hyperparameters(x, y, "constant", seed=7)
        b = optimize_hyperparameters(x, y, "constant", seed=7)
        assert a[0].lengthscales[0] == b[0].lengthscales[0]
        assert a[0].signal_variance == b[0].signal_variance
        assert a[1] == b[1]

    def test_needs_three_points(self):
        with pytest.raises(InputError):
            optimize_hyperparameters([[0.0], [1.0]], [0.0, 1.0])

    def test_best_start_beats_all_starts(self):
        # returned optimum cannot be worse than any unoptimized start
        r = np.random.default_rng(4)
        x = r.uniform(-2, 2, (15, 1))
        y = np.sin(2 * x[:, 0])
        kern, nv, mfun = optimize_hyperparameters(x, y, "zero", seed=4)
        best = gpmod.log_marginal_likelihood(x, y, kern, mfun, nv)
        for sv in (0.5, 1.0, 2.0):
            k0 = Kernel(lengthscales=[1.0], signal_variance=sv)
            assert best >= gpmod.log_marginal_likelihood(
                x, y, k0, MeanFunction("zero"), 1e-4) - 1e-6


class TestLooDiagnostics:
    def test_matches_literal_refits(self):
        gp = small_gp(seed=5, n=8, noise=1e-3)
        loo_mean, loo_var, _, _ = loo_diagnostics(gp)
        for i in range(8):
            keep = np.arange(8) != i
            sub = fit_gp(gp.design_inputs[keep], gp.design_responses[keep],
                         gp.kernel, gp.mean, gp.noise_variance)
            m, v = predict_mean_var(sub, gp.design_inputs[i:i + 1])
            assert abs(m[0] - loo_mean[i]) <= 1e-6
            assert abs(v[0] - loo_var[i]) <= 1e-6

    def test_standardized_residuals_concentrate(self):
        zs = []
        for seed in range(5):
            r = np.random.default_rng(seed)
            x = r.uniform(-3, 3, (50, 1))
            k = Kernel(lengthscales=[0.7], signal_variance=1.0)
            K = k(x) + 1e-4 * np.eye(50)
            y = np.linalg.cholesky(K) @ r.standard_normal(50)
            gp = fit_gp(x, y, k, MeanFunction("zero"), 1e-4)
            _, _, std_resid, _ = loo_diagnostics(gp)
            zs.append(np.mean(std_resid**2))
        assert 0.5 <= np.mean(zs) <= 1.5

    def test_symmetric_design_symmetric_scores(self):
        x = np.array([[-1.0], [1.0], [-0.3], [0.3]])
        y = np.array([2.0, 2.0, 1.0, 1.0])
        gp = fit_gp(x, y, _se_kernel(), MeanFunction("zero"), 0.0)
        _, _, _, score = loo_diagnostics(gp)
        assert score[0] == pytest.approx(score[1], abs=1e-8)
        assert score[2] == pytest.approx(score[3], abs=1e-8)

    def test_needs_two_points(self):
        gp = fit_gp([[0.0]], [1.0], _se_kernel(), MeanFunction("zero"), 0.0)
        with pytest.raises(InputError):
            loo_diagnostics(gp)


class TestSerialization:
    def test_json_roundtrip_preserves_predictions(self, rng):
        gp = small_gp(noise=1e-4)
        back = emulator_from_json(emulator_to_json(gp))
        q = rng.uniform(-2, 2, (6, 1))
        assert np.allclose(predict_mean_var(gp, q)[0], predict_mean_var(back, q)[0])
        assert np.allclose(predict_mean_var(gp, q)[1], predict_mean_var(back, q)[1])


class TestMultiOutput:
    def test_independent_outputs_match_scalar_fits(self, rng):
        x = np.sort(rng.uniform(-2, 2, 6))[:, None]
        y = np.stack([np.sin(x[:, 0]), np.cos(x[:, 0])], axis=1)
        k = _se_kernel()
        mo = fit_multi_output_gp(x, y, [k, k],
                                 [MeanFunction("zero"), MeanFunction("zero")], 0.0)
        q = rng.uniform(-2, 2, (4, 1))
        m, v = mo.predict_mean_var(q)
        for i in range(2):
            sm, sv_ = predict_mean_var(
                fit_gp(x, y[:, i], k, MeanFunction("zero"), 0.0), q)
            assert np.allclose(m[:, i], sm)
            assert np.allclose(v[:, i], sv_)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=2, max_size=6, unique=True),
       st.floats(0.2, 2.0))
def test_interpolation_property(xs, ls):
    """Noiseless fits interpolate for any distinct design and lengthscale."""
    x = np.asarray(sorted(xs))[:, None]
    if np.min(np.diff(x[:, 0])) < 1e-6:
        return
    y = np.cos(x[:, 0])
    gp = fit_gp(x, y, Kernel(lengthscales=[ls], signal_variance=1.0),
                MeanFunction("zero"), 0.0)
    m, v = predict_mean_var(gp, x)
    assert np.max(np.abs(m - y)) <= 1e-6
    assert np.max(v) <= 1e-6
