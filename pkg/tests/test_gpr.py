import math

import numpy as np
import pytest

from nngpr.errors import CompatibilityError, ConditioningError, DataError, SingularFitError
from nngpr.gpr import (FitState, ModelParams, OptimizerSettings, TrendModel, check_members,
                       default_init, fit, fit_trend, jittered_cholesky, load_fit, loss,
                       loss_gradient, predict, predict_series, residual_targets, save_fit,
                       with_params)
from nngpr.gridstore import (FieldSeries, GridSpec, TrainingSet, month_range,
                             snapshots_from_series)
from nngpr.kernel import KernelParams, kernel_matrix
from helpers import gp_scenario, make_training
from oracles import joint_conditional, kernel_matrix_scalar, naive_nll


def _single_member_set(means, target_means, d=1):
    """Training set whose member/target spatial means are given exactly."""
    n = len(means)
    times = month_range((2000, 1), n)
    spec = GridSpec([0.0], [0.0])
    member = FieldSeries(spec, times, np.asarray(means, float)[:, None])
    target = FieldSeries(GridSpec([0.0], np.arange(d) * 360.0 / d), times,
                         np.repeat(np.asarray(target_means, float)[:, None], d, axis=1))
    st = [(0.0, 1.0)]
    return TrainingSet(snapshots_from_series([member], st), target, st)


class TestTrend:
    def test_exact_relation(self):
        ts = _single_member_set([1.0, 2.0, 3.5, -1.0], [2.0, 4.0, 7.0, -2.0])
        np.testing.assert_allclose(fit_trend(ts).beta, [2.0], rtol=1e-14)

    def test_collinear_members(self, rng):
        times = month_range((2000, 1), 5)
        spec = GridSpec([0.0], [0.0])
        a = FieldSeries(spec, times, rng.normal(size=(5, 1)))
        b = FieldSeries(spec, times, 3 * a.frames)
        st = [(0.0, 1.0), (0.0, 1.0)]
        ts = TrainingSet(snapshots_from_series([a, b], st), a, st)
        with pytest.raises(SingularFitError, match="ridge"):
            fit_trend(ts)
        assert fit_trend(ts, ridge=1e-6).beta.shape == (2,)

    def test_normal_equations(self, rng):
        ts, _, _ = make_training(rng, n=12)
        x, y = ts.member_means, ts.target_means
        np.testing.assert_allclose(fit_trend(ts).beta, np.linalg.solve(x.T @ x, x.T @ y),
                                   rtol=1e-10)

    def test_residual_orthogonality_and_intercept(self, rng):
        ts, _, _ = make_training(rng, n=15)
        for intercept in (False, True):
            tr = fit_trend(ts, intercept)
            r = ts.target_means - tr.predict(ts.member_means)
            assert np.all(np.abs(ts.member_means.T @ r) <= 1e-10 * (1 + np.abs(ts.member_means).sum()))
            if intercept:
                assert abs(r.mean()) <= 1e-12
        assert fit_trend(ts, True).beta.shape == (3,)

    def test_residual_targets_uniform_shift(self, rng):
        ts, _, target = make_training(rng, n=5)
        tr = fit_trend(ts)
        res = residual_targets(ts, tr)
        shift = target.frames - res
        np.testing.assert_allclose(shift, shift[:, :1] * np.ones_like(shift), rtol=1e-13)


class TestLoss:
    def test_zero_kernel_unit_noise(self):
        ts = _single_member_set([1.0], [0.0])
        params = ModelParams(KernelParams(1e-300, 0.0, 1), 1.0)
        assert loss(ts, params, TrendModel(np.zeros(1))) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("n,d", [(2, 1), (3, 4), (6, 4), (5, 2)])
    def test_twice_naive_likelihood(self, rng, n, d):
        ts, _, _ = make_training(rng, n=n, d_shape=(1, d))
        params = ModelParams(KernelParams(1.3, 0.2, 4), 0.3)
        trend = fit_trend(ts) if n >= 2 else TrendModel(np.zeros(2))
        k = kernel_matrix_scalar(ts.inputs, 1.3, 0.2, 4)
        expected = 2 * naive_nll(k, 0.3, residual_targets(ts, trend))
        assert loss(ts, params, trend) == pytest.approx(expected, rel=1e-8)

    def test_doubling_locations_doubles_loss(self, rng):
        ts, members, target = make_training(rng, n=5, d_shape=(1, 2))
        times = target.times
        wide = FieldSeries(GridSpec([0.0], [0, 90, 180, 270]), times,
                           np.hstack([target.frames, target.frames]))
        ts2 = TrainingSet(ts.snapshots, wide, ts.standardizers)
        trend = TrendModel(np.zeros(2))
        p = ModelParams(KernelParams(1.1, 0.4, 3), 0.2)
        assert loss(ts2, p, trend) == pytest.approx(2 * loss(ts, p, trend), rel=1e-13)


class TestGradient:
    def test_diagonal_kernel_closed_form(self, rng):
        ts, _, _ = make_training(rng, n=7, d_shape=(1, 3))
        trend = fit_trend(ts)
        res = residual_targets(ts, trend)
        s2 = 0.7
        p = ModelParams(KernelParams(1e-300, 1e-300, 2), s2)
        n, d = res.shape
        # loss = sum(Y^2)/s2 + d n log s2  ->  d/dlog s2 = -sum(Y^2)/s2 + d n
        expected = -np.sum(res ** 2) / s2 + d * n
        g = loss_gradient(ts, p, trend)
        assert g[2] == pytest.approx(expected, rel=1e-6)
        assert abs(g[0]) < 1e-6 and abs(g[1]) < 1e-6

    def test_deterministic(self, rng):
        ts, _, _ = make_training(rng, n=6)
        trend = fit_trend(ts)
        p = ModelParams(KernelParams(1.5, 0.3, 5), 0.2)
        assert loss_gradient(ts, p, trend).tobytes() == loss_gradient(ts, p, trend).tobytes()

    def test_richardson_consistency(self, rng):
        ts, _, _ = make_training(rng, n=8, d_shape=(2, 3))
        trend = fit_trend(ts)
        r = np.random.default_rng(3)
        for _ in range(5):
            theta = r.uniform([-1, -3, -3], [1, 0, 0])
            p = ModelParams.from_log(theta, 5)
            g1 = loss_gradient(ts, p, trend, 1e-4)
            g2 = loss_gradient(ts, p, trend, 5e-5)
            assert np.linalg.norm(g1 - g2) <= 1e-3 * max(np.linalg.norm(g2), 1e-8)


class TestJitter:
    def test_plain(self):
        _, j = jittered_cholesky(np.eye(3))
        assert j == 0.0

    def test_singular_gets_jitter(self):
        a = np.ones((3, 3))
        chol, j = jittered_cholesky(a)
        assert j > 0
        np.testing.assert_allclose(chol @ chol.T, a + j * np.eye(3), atol=1e-12)

    def test_indefinite_raises(self):
        with pytest.raises(ConditioningError) as exc:
            jittered_cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))
        assert exc.value.jitter > 0


@pytest.fixture(scope="module")
def small_fit():
    ts, truth = gp_scenario(seed=4, n=40, d=16, d_in=6, truth=(1.2, 0.3, 0.1), depth=4)
    state = fit(ts, None, OptimizerSettings(max_iter=200), member_names=("a",), depth=4)
    return ts, state


class TestFit:
    def test_chol_reproduces_covariance(self, small_fit):
        ts, state = small_fit
        k = kernel_matrix(ts.inputs, state.params.kernel)
        k += (state.params.noise_var + state.jitter) * np.eye(ts.n)
        rec = state.chol @ state.chol.T
        assert np.linalg.norm(rec - k) <= 1e-8 * np.linalg.norm(k)

    def test_trace_monotone(self, small_fit):
        tr = np.array(small_fit[1].trace)
        tail = tr[len(tr) // 2:]
        assert np.all(np.diff(tail) <= 1e-8 * (1 + np.abs(tail[:-1])))
        assert np.all(np.diff(tr) <= 0)

    def test_fixed_point(self, small_fit):
        ts, state = small_fit
        again = fit(ts, state.params, OptimizerSettings(max_iter=200))
        assert again.converged
        assert len(again.trace) - 1 <= 2 * OptimizerSettings().patience
        for a, b in zip(again.params.to_log(), state.params.to_log()):
            assert abs(math.exp(a - b) - 1) <= 0.01

    def test_default_init(self):
        p = default_init(np.full((3, 2), 2.0) + np.arange(6).reshape(3, 2))
        assert p.kernel.sigma_w2 == 1.6 and p.kernel.sigma_b2 == 0.1
        assert p.noise_var == pytest.approx(0.1 * np.var(np.arange(6)))

    def test_needs_two_samples(self, rng):
        ts, _, _ = make_training(rng, n=1)
        with pytest.raises(DataError):
            fit(ts)

    def test_minibatch_flag_runs(self, rng):
        ts, _ = gp_scenario(seed=1, n=20, d=16, d_in=4, depth=3)
        state = fit(ts, None, OptimizerSettings(max_iter=5, batch_size=4), depth=3)
        assert len(state.trace) == 5 and not state.converged


class TestPredict:
    def test_noiseless_interpolation(self, rng):
        ts, _ = gp_scenario(seed=2, n=12, d=4, d_in=6, depth=3)
        state = with_params(fit(ts, None, OptimizerSettings(max_iter=0), depth=3),
                            ModelParams(KernelParams(1.0, 0.2, 3), 1e-12))
        pred = predict(state, ts.snapshots[0])
        assert np.max(np.abs(pred.mean_field.values - ts.targets.frames[0])) <= 1e-4
        assert pred.latent_var <= 1e-6

    def test_prior_reversion(self, rng):
        ts, _ = gp_scenario(seed=2, n=12, d=4, d_in=6, depth=3)
        state = with_params(fit(ts, None, OptimizerSettings(max_iter=0), depth=3),
                            ModelParams(KernelParams(1.0, 0.2, 3), 1e12))
        snap = ts.snapshots[3]
        trend = state.trend.predict(snap.member_means)[0]
        np.testing.assert_allclose(predict(state, snap).mean_field.values, trend, atol=1e-4)

    def test_joint_gaussian_conditional(self, rng):
        for trial in range(10):
            ts, members, target = make_training(rng, n=4, d_shape=(1, 3))
            train = TrainingSet(ts.snapshots[:3], target.select(np.arange(4) < 3),
                                ts.standardizers)
            params = ModelParams(KernelParams(rng.uniform(0.5, 2), rng.uniform(0.05, 1), 3),
                                 rng.uniform(0.05, 1))
            state = with_params(fit(train, None, OptimizerSettings(max_iter=0), depth=3),
                                params)
            snap = ts.snapshots[3]
            pred = predict(state, snap)
            xs = np.vstack([train.inputs, snap.x_vec])
            k = kernel_matrix_scalar(xs, params.kernel.sigma_w2, params.kernel.sigma_b2, 3)
            resid = residual_targets(train, state.trend)
            trend = state.trend.predict(snap.member_means)[0]
            for p in range(3):
                mean, var = joint_conditional(k[:3, :3], k[:3, 3], k[3, 3],
                                              params.noise_var, resid[:, p])
                assert pred.mean_field.values[p] == pytest.approx(trend + mean, rel=1e-8,
                                                                  abs=1e-12)
                assert pred.latent_var == pytest.approx(var, rel=1e-8, abs=1e-14)
            assert pred.predictive_var == pred.latent_var + params.noise_var
            lo, hi = pred.interval(0.95)
            np.testing.assert_allclose(hi - lo, 2 * 1.959963984540054 * pred.predictive_std)

    def test_latent_var_bounded_by_prior(self, small_fit):
        ts, state = small_fit
        for snap in ts.snapshots[:5]:
            pred = predict(state, snap)
            prior = kernel_matrix([snap.x_vec], state.params.kernel)[0, 0]
            assert 0 <= pred.latent_var <= prior

    def test_series(self, small_fit):
        ts, state = small_fit
        assert predict_series(state, []) == []
        one = predict_series(state, ts.snapshots[:1])
        assert one[0].mean_field.values.tobytes() == predict(state, ts.snapshots[0]).mean_field.values.tobytes()
        seq = predict_series(state, ts.snapshots, threads=1)
        par = predict_series(state, ts.snapshots, threads=4)
        for a, b in zip(seq, par):
            assert a.time == b.time
            assert a.mean_field.values.tobytes() == b.mean_field.values.tobytes()
            assert a.latent_var == b.latent_var

    def test_layout_mismatch(self, small_fit, rng):
        ts, state = small_fit
        other, _, _ = make_training(rng, n=3)
        with pytest.raises(CompatibilityError):
            predict(state, other.snapshots[0])
        with pytest.raises(CompatibilityError):
            check_members(state, ("b",))
        check_members(state, ("a",))


def test_save_load_round_trip(small_fit, tmp_path):
    ts, state = small_fit
    save_fit(state, tmp_path / "fit")
    back = load_fit(tmp_path / "fit")
    assert isinstance(back, FitState)
    assert back.params == state.params
    assert back.member_names == state.member_names
    assert back.chol.tobytes() == state.chol.tobytes()
    assert back.alpha.tobytes() == state.alpha.tobytes()
    assert back.trace == state.trace
    a = predict(state, ts.snapshots[1])
    b = predict(back, ts.snapshots[1])
    assert a.mean_field.values.tobytes() == b.mean_field.values.tobytes()
    # saving the reloaded state reproduces the files byte for byte
    save_fit(back, tmp_path / "again")
    assert (tmp_path / "fit.bin").read_bytes() == (tmp_path / "again.bin").read_bytes()


@pytest.mark.slow
def test_recovers_noise_variance():
    ts, truth = gp_scenario(seed=0)
    # tighter tolerance than the default so the optimizer settles to within 1e-3 in loss
    state = fit(ts, None, OptimizerSettings(max_iter=3000, tol=1e-9))
    assert abs(state.params.noise_var / truth.noise_var - 1) <= 0.3
    assert loss(ts, state.params, state.trend) <= loss(ts, truth, state.trend) + 1e-3
