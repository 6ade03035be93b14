from MultiscaleLDP.Models import ModelSpec
from MultiscaleLDP.Noise import ControlPath, SeedSpec
from MultiscaleLDP.Space import L2Pivot
from MultiscaleLDP.Simulate import (
    ScaleParams,
    StoppingSpec,
    auxiliary_difference,
    run_auxiliary,
    run_ensemble,
    run_trajectory,
    step_slow_fast,
    time_increment_statistic,
)
from numpy.testing import assert_allclose, assert_array_equal
import numpy as np
import pytest


def linear_model(g1_sigma=1.0, g2_sigma=1.0, diffusivity=1.0, c_slow=0.0, c_fast=1.0):
    return ModelSpec.from_dict(
        {
            "grid": {"n_interior": 6},
            "slow": {"kind": "linear", "diffusivity": diffusivity},
            "coupling": {"kind": "linear", "c_slow": c_slow, "c_fast": c_fast},
            "fast": {"kind": "linear_ou", "lambda2": 1.0, "b": 1.0},
            "noise": {"n_modes": 2, "g1": {"sigma": g1_sigma}, "g2": {"sigma": g2_sigma}},
        },
        name="linear",
    )


scales = ScaleParams(0.5, 0.25)


class Test_ScaleParams:
    def test_defaults(self):
        s = ScaleParams(0.1, 0.01)
        assert s.n_steps == 2000
        assert s.dt == pytest.approx(5e-4)
        assert s.delta_steps == 200
        assert s.record_stride == 50
        assert s.delta == pytest.approx(0.1)

    def test_delta_is_multiple_of_four_steps(self):
        s = ScaleParams(0.5, 0.25, delta=0.33)
        assert s.delta_steps % 4 == 0
        assert s.delta == pytest.approx(s.delta_steps * s.dt)

    def test_from_epsilon(self):
        s = ScaleParams.from_epsilon(0.25)
        assert s.alpha == pytest.approx(0.125)
        assert s.ratio == pytest.approx(0.5)
        assert not s.asymptotic
        assert ScaleParams.from_epsilon(1e-4).asymptotic

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(epsilon=0.1, alpha=0.2),
            dict(epsilon=1.5, alpha=0.1),
            dict(epsilon=0.5, alpha=0.0),
            dict(epsilon=0.5, alpha=0.25, dt=0.1),
            dict(epsilon=0.5, alpha=0.25, dt_factor=10),
            dict(epsilon=0.5, alpha=0.25, T=-1.0),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ScaleParams(**kwargs)


class Test_Step:
    def test_deterministic_linear_step(self):
        model = linear_model(g1_sigma=0.0, g2_sigma=0.0, c_fast=0.0)
        s = ScaleParams(0.0, 0.25)
        e1 = model.grid.sine(1).values
        X, Y = step_slow_fast(model, s, (e1, np.zeros(6)), np.zeros(2))
        # implicit Euler on the first mode
        assert_allclose(X, e1 / (1 + s.dt * model.grid.basis.lambda1), atol=1e-12)
        tau = s.dt / s.alpha
        assert_allclose(Y, tau * e1 / (1 + tau), atol=1e-12)

    def test_control_needs_zero_fast_noise_at_epsilon_zero(self):
        model = linear_model()
        with pytest.raises(ValueError):
            step_slow_fast(model, ScaleParams(0.0, 0.25), (np.zeros(6), np.zeros(6)), np.zeros(2), phi=np.ones(2))


class Test_Trajectory:
    def test_recording(self):
        model = linear_model()
        traj = run_trajectory(model, scales, np.zeros(6), np.zeros(6), stream=SeedSpec(0).stream(0))
        assert traj.times[0] == 0.0 and traj.times[-1] == scales.T
        assert traj.slow.shape == (traj.times.size, 6)
        assert traj.exit_time == scales.T
        assert not traj.failed
        frame = traj.to_frame(model, fields=True)
        assert {"t", "x_h", "x_v", "y_h", "log_girsanov", "x_1", "y_6"} <= set(frame.columns)

    def test_deterministic_limit_ignores_seed(self):
        model = linear_model(g2_sigma=0.0)
        s = ScaleParams(0.0, 0.25)
        x0 = model.grid.sine(1).values
        a = run_trajectory(model, s, x0, np.zeros(6), stream=SeedSpec(1).stream(0))
        b = run_trajectory(model, s, x0, np.zeros(6), stream=SeedSpec(2).stream(0))
        assert_array_equal(a.slow, b.slow)

    def test_control_checks(self):
        model = linear_model()
        with pytest.raises(ValueError, match="modes"):
            run_trajectory(model, scales, np.zeros(6), np.zeros(6), ControlPath.zeros(1.0, 4, 3))
        with pytest.raises(ValueError, match="horizon"):
            run_trajectory(model, scales, np.zeros(6), np.zeros(6), ControlPath.zeros(2.0, 4, 2))

    def test_stopping_freezes_state(self):
        model = linear_model()
        x0 = model.grid.sine(1, 2.0).values
        traj = run_trajectory(model, scales, x0, np.zeros(6), stopping=StoppingSpec(N=1.0))
        assert traj.exit_time == scales.dt
        assert_allclose(traj.slow[-1], traj.slow[1])


class Test_Ensemble:
    def test_thread_invariance(self):
        model = linear_model()
        kwargs = dict(n_paths=10, seed=3, chunk_size=3, progress=False)
        one = run_ensemble(model, scales, np.zeros(6), np.zeros(6), threads=1, **kwargs)
        many = run_ensemble(model, scales, np.zeros(6), np.zeros(6), threads=4, **kwargs)
        assert_array_equal(one.slow, many.slow)
        assert_array_equal(one.fast, many.fast)

    def test_path_matches_single_trajectory(self):
        model = linear_model()
        ensemble = run_ensemble(model, scales, np.zeros(6), np.zeros(6), n_paths=4, seed=5, progress=False)
        single = run_trajectory(model, scales, np.zeros(6), np.zeros(6), stream=SeedSpec(5).stream(2))
        assert_allclose(ensemble.trajectory(2).slow, single.slow, atol=1e-12)

    def test_index_offset(self):
        model = linear_model()
        full = run_ensemble(model, scales, np.zeros(6), np.zeros(6), n_paths=4, seed=5, progress=False)
        tail = run_ensemble(
            model, scales, np.zeros(6), np.zeros(6), n_paths=2, seed=5, index_offset=2, progress=False
        )
        assert_allclose(tail.slow, full.slow[2:], atol=1e-12)

    def test_girsanov_weights_average_to_one(self):
        model = linear_model()
        phi = ControlPath.constant(1.0, 4, [0.5, 0.0])
        ensemble = run_ensemble(model, scales, np.zeros(6), np.zeros(6), phi, n_paths=1000, seed=1, progress=False)
        w = ensemble.weights
        assert abs(w.mean() - 1) <= 3 * w.std(ddof=1) / np.sqrt(w.size)
        assert ensemble.summary_frame().height == 1000

    def test_girsanov_reweighting_matches_uncontrolled(self):
        model = linear_model()
        x0 = model.grid.sine(1).values
        kwargs = dict(n_paths=1000, progress=False)
        plain = run_ensemble(model, scales, x0, np.zeros(6), seed=11, **kwargs)
        phi = ControlPath.constant(1.0, 4, [0.5, 0.0])
        tilted = run_ensemble(model, scales, x0, np.zeros(6), phi, seed=12, **kwargs)
        f_plain = plain.terminal[:, 2]
        f_tilted = tilted.terminal[:, 2] * tilted.weights
        # the control moves the unweighted terminal law
        assert abs(tilted.terminal[:, 2].mean() - f_plain.mean()) > 0.03
        stderr = np.hypot(f_plain.std(ddof=1), f_tilted.std(ddof=1)) / np.sqrt(1000)
        assert abs(f_tilted.mean() - f_plain.mean()) <= 3 * stderr

    def test_exit_time_monotone_in_radius(self):
        model = linear_model()
        x0 = model.grid.sine(1, 2.0).values
        exits = [
            run_ensemble(
                model, scales, x0, np.zeros(6), n_paths=20, seed=7, stopping=StoppingSpec(N=N), progress=False
            ).exit_time
            for N in (0.3, 0.6, 1.2, np.inf)
        ]
        for shorter, longer in zip(exits, exits[1:]):
            assert np.all(longer >= shorter)
        assert np.all(exits[-1] == scales.T)

    def test_invalid(self):
        with pytest.raises(ValueError):
            run_ensemble(linear_model(), scales, np.zeros(6), np.zeros(6), n_paths=0)
        with pytest.raises(ValueError):
            run_ensemble(linear_model(), scales, np.zeros(6), np.zeros(6), threads=0)


class Test_Statistics:
    def test_constant_path_has_no_increment(self):
        model = linear_model(g1_sigma=0.0, g2_sigma=0.0, diffusivity=0.0, c_fast=0.0)
        traj = run_trajectory(model, scales, model.grid.sine(1).values, np.zeros(6))
        assert time_increment_statistic(traj, scales.delta) == pytest.approx(0.0, abs=1e-20)

    def test_increment_positive_with_noise(self):
        model = linear_model()
        traj = run_trajectory(model, scales, np.zeros(6), np.zeros(6), stream=SeedSpec(0).stream(0))
        assert time_increment_statistic(traj, scales.delta) > 0
        with pytest.raises(ValueError):
            time_increment_statistic(traj, scales.delta * 1.01)

    def test_auxiliary_matches_when_slow_is_frozen(self):
        # X never moves, so freezing it on blocks changes nothing
        model = linear_model(g1_sigma=0.0, diffusivity=0.0, c_fast=0.0)
        x0 = model.grid.sine(1).values
        traj = run_trajectory(model, scales, x0, np.zeros(6), stream=SeedSpec(4).stream(0))
        aux = run_auxiliary(model, scales, traj, np.zeros(6), SeedSpec(4).stream(0))
        assert_allclose(aux.fast, traj.fast, atol=1e-10)
        assert auxiliary_difference(traj, aux) < 1e-18

    def test_auxiliary_differs_under_slow_motion(self):
        model = linear_model()
        traj = run_trajectory(model, scales, np.zeros(6), np.zeros(6), stream=SeedSpec(4).stream(0))
        aux = run_auxiliary(model, scales, traj, np.zeros(6), SeedSpec(4).stream(0))
        assert auxiliary_difference(traj, aux) > 0

    def test_auxiliary_difference_shrinks_with_block_length(self):
        # (alpha, delta) along delta = sqrt(alpha), then shorter blocks at fixed alpha
        model = linear_model(diffusivity=0.0, c_fast=0.0)
        grid_points = [ScaleParams(0.5, 0.04), ScaleParams(0.5, 0.01), ScaleParams(0.5, 0.01, delta=0.025)]
        means = []
        for s in grid_points:
            values = []
            for seed in range(24):
                traj = run_trajectory(model, s, np.zeros(6), np.zeros(6), stream=SeedSpec(seed).stream(0))
                aux = run_auxiliary(model, s, traj, np.zeros(6), SeedSpec(seed).stream(0))
                values.append(auxiliary_difference(traj, aux))
            means.append(np.mean(values))
        assert means[0] > means[1] > means[2] > 0


def fitted_increment_exponent(model):
    s = ScaleParams(0.5, 0.0125, dt=0.000625, delta=0.025)
    ensemble = run_ensemble(model, s, np.zeros(6), np.zeros(6), n_paths=50, seed=9, record_stride=1, progress=False)
    deltas = np.array([0.1, 0.05, 0.025])
    stats = [time_increment_statistic(ensemble, d) for d in deltas]
    return np.polyfit(np.log(deltas), np.log(stats), 1)[0]


class Test_Moments:
    def test_energy_estimate(self):
        model = linear_model()
        s = ScaleParams(0.5, 0.25)
        theta1, gamma1 = model.constants.theta1, model.gamma1
        ratios = {}
        for amplitude in (0.0, 1.0, 2.0, 4.0):
            x0 = model.grid.sine(1, amplitude).values
            ens = run_ensemble(model, s, x0, np.zeros(6), n_paths=100, seed=2, record_stride=1, progress=False)
            sup = np.max(model.pivot.norm(ens.slow) ** 2, axis=1)
            energy = np.sum(np.diff(ens.times) * model.v_norm(ens.slow[:, :-1]) ** gamma1, axis=1)
            ratios[amplitude] = np.max(sup + 2 * theta1 * energy) / (1 + float(model.pivot.norm(x0)) ** 2)
        assert max(ratios.values()) < 20
        assert ratios[4.0] <= 2 * ratios[1.0]

    def test_fast_second_moment_uniform_in_epsilon(self):
        model = linear_model()
        x0 = model.grid.sine(1).values
        moments = []
        for eps in (0.1, 0.05):
            s = ScaleParams.from_epsilon(eps)
            ens = run_ensemble(model, s, x0, np.zeros(6), n_paths=40, seed=4, progress=False)
            moments.append(np.mean(L2Pivot(model.grid).norm(ens.fast) ** 2))
        bound = 1 + float(model.pivot.norm(x0)) ** 2
        assert all(0 < m < 10 * bound for m in moments)
        assert 0.5 < moments[1] / moments[0] < 2

    def test_increment_exponent(self):
        assert 0.4 <= fitted_increment_exponent(linear_model()) <= 1.1

    def test_brownian_increment_exponent(self):
        model = linear_model(diffusivity=0.0, c_fast=0.0)
        assert fitted_increment_exponent(model) == pytest.approx(1.0, abs=0.1)
