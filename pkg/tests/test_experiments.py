import numpy as np
import pytest

from nngpr.errors import DataError
from nngpr.experiments import (Ensemble, ExperimentSettings, SyntheticScenario,
                               decadal_blocks, generate_synthetic, pca_shift,
                               run_all_perfect_model, run_experiment, run_perfect_model,
                               write_ensemble)
from nngpr.gpr import OptimizerSettings
from nngpr.gridstore import FieldSeries, GridSpec, latitude_weights, load_manifest

FAST = ExperimentSettings(depth=3, optimizer=OptimizerSettings(max_iter=15))


def small_scenario(**kw):
    base = dict(seed=3, m=3, target_shape=(6, 8), member_shapes=((6, 8), (4, 6)),
                n_train=60, n_test=240, start=(2000, 1), n_modes=4)
    base.update(kw)
    return SyntheticScenario(**base)


class TestDecades:
    def test_eight_decades(self):
        blocks = decadal_blocks(2021, 2100)
        assert len(blocks) == 8 and blocks[0] == (2021, 2030) and blocks[-1] == (2091, 2100)

    def test_single_decade(self):
        assert decadal_blocks(2021, 2030) == [(2021, 2030)]

    def test_partial(self):
        with pytest.raises(DataError):
            decadal_blocks(2021, 2035)
        assert decadal_blocks(2021, 2035, allow_partial=True) == [(2021, 2030), (2031, 2035)]

    def test_empty(self):
        with pytest.raises(DataError):
            decadal_blocks(2030, 2021)


class TestPCAShift:
    def test_axis_aligned_member_scaling(self, rng):
        n = 200
        train = np.column_stack([rng.normal(size=n) * 3, rng.normal(size=n) * 1e-3])
        diag = pca_shift(train, train[:10] + [5.0, 0.0], granularity="member")
        np.testing.assert_allclose(np.abs(diag.pc_basis), np.eye(2), atol=1e-4)
        assert diag.eigenvalues[0] >= diag.eigenvalues[1]

    def test_no_shift(self, rng):
        train = rng.normal(size=(50, 6))
        diag = pca_shift(train, train)
        mu = np.vstack([diag.near_proj, diag.long_proj]).mean(axis=0)
        np.testing.assert_allclose(mu, 0.0, atol=1e-12)

    def test_orthonormal_basis(self, rng):
        train = rng.normal(size=(30, 12)) @ rng.normal(size=(12, 12))
        diag = pca_shift(train, rng.normal(size=(8, 12)))
        np.testing.assert_allclose(diag.pc_basis @ diag.pc_basis.T, np.eye(2), atol=1e-12)
        assert diag.eigenvalues[0] >= diag.eigenvalues[1] > 0

    def test_shift_detected(self, rng):
        train = rng.normal(size=(100, 5))
        future = rng.normal(size=(40, 5)) + np.linspace(0, 4, 40)[:, None]
        diag = pca_shift(train, future, np.arange(40), 20)
        assert diag.long_displacement > diag.near_displacement
        assert len(diag.to_csv().splitlines()) == 1 + 100 + 40

    def test_rank_one(self, rng):
        v = rng.normal(size=40)
        with pytest.raises(DataError):
            pca_shift(np.column_stack([v, 2 * v, -v]), np.zeros((0, 3)), granularity="member")

    def test_bad_granularity(self, rng):
        with pytest.raises(DataError):
            pca_shift(rng.normal(size=(5, 3)), rng.normal(size=(2, 3)), granularity="x")


class TestGenerator:
    def test_deterministic(self):
        a, b = generate_synthetic(small_scenario()), generate_synthetic(small_scenario())
        for x, y in zip(a.members + (a.target,), b.members + (b.target,)):
            assert x.frames.tobytes() == y.frames.tobytes()
        c = generate_synthetic(small_scenario(seed=4))
        assert not np.array_equal(a.target.frames, c.target.frames)

    def test_noiseless_limit(self):
        sc = small_scenario(member_noise=0, member_bias=0, member_spread=0, obs_noise=0,
                            nonlinearity=False, member_shapes=((6, 8),))
        ens = generate_synthetic(sc)
        for m in ens.members:
            np.testing.assert_allclose(m.frames, ens.target.frames, atol=1e-12)

    def test_shapes_and_times(self):
        sc = small_scenario()
        ens = generate_synthetic(sc)
        assert ens.m == 3 and ens.names == ("member00", "member01", "member02")
        assert ens.members[1].spec.shape == (4, 6) and ens.target.spec.shape == (6, 8)
        assert len(ens.target) == sc.n_time
        assert sc.train_range[1] < sc.test_range[0]

    def test_scenario_json(self):
        sc = small_scenario()
        assert SyntheticScenario.from_json(sc.to_json()) == sc
        with pytest.raises(DataError):
            SyntheticScenario.from_json({"bogus": 1})

    def test_write_round_trip(self, tmp_path):
        ens = generate_synthetic(small_scenario(n_test=0))
        write_ensemble(ens, tmp_path)
        back = Ensemble.from_manifest(load_manifest(tmp_path / "manifest.json"))
        assert back.names == ens.names
        assert back.members[2].frames.tobytes() == ens.members[2].frames.tobytes()


class TestPerfectModel:
    def test_identical_members_ea_exact(self, rng):
        times = np.asarray(small_scenario().times)
        spec = GridSpec.regular(6, 8)
        v = rng.normal(size=(len(times), 48))
        s = FieldSeries(spec, times, v)
        ens = Ensemble(("a", "b", "c"), (s, s, s))
        sc = small_scenario()
        run = run_perfect_model(ens, 0, ("ea",), (sc.train_range, sc.test_range), FAST)
        assert np.all(run.scores.column("EA", "mse") == 0.0)
        assert np.all(run.scores.column("EA", "ssim") == 1.0)

    def test_hold_out_hygiene(self):
        sc = small_scenario()
        ens = generate_synthetic(sc)
        split = (sc.train_range, sc.test_range)
        run = run_perfect_model(ens, 1, ("ea", "lm"), split, FAST)
        assert run.held_out_name == "member01" and "member01" not in run.input_names
        # changing the held-out member's test values must not change any prediction
        spoiled = ens.members[1].frames.copy()
        spoiled[sc.n_train:] += 100.0
        members = list(ens.members)
        members[1] = FieldSeries(ens.members[1].spec, ens.members[1].times, spoiled)
        run2 = run_perfect_model(Ensemble(ens.names, members), 1, ("ea", "lm"), split, FAST)
        for k in ("ea", "lm"):
            assert run.result.predictions[k][0].tobytes() == run2.result.predictions[k][0].tobytes()

    def test_decade_mse_consistent(self):
        sc = small_scenario()
        ens = generate_synthetic(sc)
        run = run_perfect_model(ens, 0, ("ea",), (sc.train_range, sc.test_range), FAST)
        assert run.result.windows == ["2005-2014", "2015-2024"]
        truth = ens.members[0].frames[sc.n_train:]
        mean = run.result.predictions["ea"][0]
        w = latitude_weights(ens.members[0].spec)
        full = np.mean(((mean - truth) ** 2) @ w / w.size)
        # equal-length decades, so the mean of decade scores is the full-period score
        assert np.mean(run.scores.column("EA", "mse")) == pytest.approx(full, rel=1e-12)
        bv = run.bias_variance["ea"]
        np.testing.assert_allclose(bv.mse, run.scores.column("EA", "mse"), rtol=1e-12)

    def test_all_members_and_methods(self):
        sc = small_scenario()
        ens = generate_synthetic(sc)
        runs = run_all_perfect_model(ens, ("nngpr", "lm", "wea", "ea"),
                                     (sc.train_range, sc.test_range), FAST)
        assert len(runs) == 3
        for r in runs:
            assert not r.skipped
            assert sorted(r.scores.methods) == ["EA", "LM", "NN-GPR", "WEA"]
            assert len(r.scores.windows) == 2

    def test_threads_identical(self):
        sc = small_scenario()
        ens = generate_synthetic(sc)
        split = (sc.train_range, sc.test_range)
        a = run_all_perfect_model(ens, ("nngpr", "ea"), split, FAST, threads=1)
        b = run_all_perfect_model(ens, ("nngpr", "ea"), split, FAST, threads=3)
        for x, y in zip(a, b):
            assert x.scores.to_csv() == y.scores.to_csv()

    def test_errors(self):
        sc = small_scenario()
        ens = generate_synthetic(sc)
        with pytest.raises(DataError):
            run_perfect_model(ens, 3, ("ea",), (sc.train_range, sc.test_range))
        with pytest.raises(DataError):
            run_perfect_model(ens, 0, ("ea",), (sc.test_range, sc.train_range))
        with pytest.raises(DataError):
            run_perfect_model(ens, 0, ("ea",), None)

    def test_unknown_method_is_skipped(self):
        sc = small_scenario()
        ens = generate_synthetic(sc)
        run = run_experiment(ens.members, ens.target, ("ea", "bogus"),
                             sc.train_range, sc.test_range, FAST)
        assert "bogus" in run.skipped and run.scores.methods == ["EA"]
