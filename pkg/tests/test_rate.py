from MultiscaleLDP.Averaging import AveragedDrift
from MultiscaleLDP.Models import ModelSpec
from MultiscaleLDP.Noise import ControlPath
from MultiscaleLDP.Rate import (
    FullPath,
    RateProblem,
    RateSettings,
    TerminalCost,
    TerminalSet,
    level_set_sample,
    lq_closed_form,
    lq_laplace_value,
    lq_optimal_control,
    minimize_rate,
    objective_and_gradient,
)
from MultiscaleLDP.Skeleton import SkeletonProblem, solve_skeleton
from MultiscaleLDP.Space import ModeCoefficient, QuadraticCost
from numpy.testing import assert_allclose
import numpy as np
import pytest


def lq_model(sigma=1.0, lam=1.0):
    # dX = -λX dt + σφ dt on a single node, so the mode coefficient is X itself
    return ModelSpec.from_dict(
        {
            "grid": {"n_interior": 1, "length": 1.0},
            "slow": {"kind": "linear", "diffusivity": 0.0, "shift": lam},
            "coupling": {"kind": "linear", "c_slow": 0.0, "c_fast": 0.0},
            "fast": {"kind": "linear_ou", "lambda2": 1.0, "b": 1.0},
            "noise": {"n_modes": 1, "g1": {"sigma": sigma}, "g2": {"sigma": 1.0}},
        },
        name="lq",
    )


def lq_problem(dt=5e-4, n_segments=20, sigma=1.0, target=None, lam=1.0, T=1.0, a=1.0, **settings):
    model = lq_model(sigma, lam)
    skeleton = SkeletonProblem(model, ControlPath.zeros(T, n_segments, 1), np.zeros(1), dt=dt)
    target = target or TerminalSet(ModeCoefficient(model.grid, 1), a)
    return RateProblem(skeleton, target, RateSettings(**settings))


def test_closed_forms():
    assert lq_closed_form(1.0, 1.0, 1.0, 1.0) == pytest.approx(1.1565176427, rel=1e-9)
    assert lq_laplace_value(1.0, 1.0, 1.0, 1.0, 1.0) == pytest.approx(0.5362894, rel=1e-6)
    exact = lq_laplace_value(1.0, 1.0, 1.0, 1.0, 1.0, epsilon=0.1)
    assert exact > lq_laplace_value(1.0, 1.0, 1.0, 1.0, 1.0)
    # no drift: S = σ²T
    assert lq_closed_form(0.0, 2.0, 1.0, 2.0) == pytest.approx(0.5)


def test_optimal_control_energy():
    times = np.linspace(0, 1, 2001)
    c = lq_optimal_control(1.0, 1.0, 1.0, 1.0, times)
    energy = 0.5 * np.sum(np.diff(times) * c**2)
    assert energy == pytest.approx(lq_closed_form(1.0, 1.0, 1.0, 1.0), rel=1e-6)


class Test_Gradient:
    def test_matches_finite_differences(self):
        prob = lq_problem(dt=0.01, n_segments=5)
        phi = ControlPath.constant(1.0, 5, [0.3]).with_coefficients(np.linspace(0.1, 0.9, 5))
        value, gradient = objective_and_gradient(prob, phi)
        eps = 1e-6
        fd = np.zeros(5)
        for i in range(5):
            e = np.zeros((5, 1))
            e[i] = eps
            fd[i] = (
                objective_and_gradient(prob, phi.with_coefficients(phi.coefficients + e))[0]
                - objective_and_gradient(prob, phi.with_coefficients(phi.coefficients - e))[0]
            ) / (2 * eps)
        assert np.isfinite(value)
        assert_allclose(gradient[:, 0], fd, rtol=1e-5, atol=1e-6)

    def test_needs_differentiable_drift(self):
        model = ModelSpec.from_dict(
            {
                "grid": {"n_interior": 4},
                "slow": {"kind": "linear", "diffusivity": 1.0},
                "coupling": {"kind": "linear", "c_slow": 0.0, "c_fast": 1.0},
                "fast": {"kind": "linear_ou", "lambda2": 1.0, "b": 1.0},
                "noise": {"n_modes": 1, "g1": {"sigma": 1.0}, "g2": {"sigma": 1.0}},
            }
        )
        drift = AveragedDrift(model, backend="ergodic_mc", n_replicas=2)
        skeleton = SkeletonProblem(model, ControlPath.zeros(1.0, 4, 1), np.zeros(4), dt=0.05, drift=drift)
        with pytest.raises(ValueError, match="differentiable"):
            RateProblem(skeleton, TerminalSet(ModeCoefficient(model.grid, 1), 1.0))


class Test_Minimize:
    @pytest.mark.slow
    @pytest.mark.parametrize("lam, sigma, T, a", [(1.0, 1.0, 1.0, 1.0), (2.0, 0.5, 1.0, 0.5), (0.5, 1.0, 2.0, 1.5)])
    def test_lq_rate(self, lam, sigma, T, a):
        prob = lq_problem(dt=1e-4, n_segments=40, sigma=sigma, lam=lam, T=T, a=a)
        result = minimize_rate(prob)
        assert result.feasible
        assert result.residual <= 1e-4
        assert result.I_value == pytest.approx(lq_closed_form(lam, sigma, T, a), rel=1e-3)
        expected = lq_optimal_control(lam, sigma, T, a, result.phi_star.times)
        assert_allclose(result.phi_star.coefficients[:, 0], expected, rtol=2e-2)
        assert result.trace

    @pytest.mark.slow
    def test_segment_refinement(self):
        coarse = minimize_rate(lq_problem(n_segments=20))
        fine = minimize_rate(lq_problem(n_segments=40))
        assert fine.I_value == pytest.approx(coarse.I_value, rel=1e-3)

    def test_rate_monotone_in_level(self):
        values = [minimize_rate(lq_problem(dt=0.01, n_segments=10, a=a)).I_value for a in (0.25, 0.5, 1.0, 1.5)]
        assert all(np.isfinite(values))
        assert np.all(np.diff(values) > 0)

    @pytest.mark.parametrize("step_rule", ["armijo", "lbfgs"])
    def test_step_rules_agree(self, step_rule):
        reference = minimize_rate(lq_problem(dt=0.01, n_segments=10))
        other = minimize_rate(lq_problem(dt=0.01, n_segments=10, step_rule=step_rule))
        assert other.feasible
        assert other.I_value == pytest.approx(reference.I_value, rel=1e-3)

    @pytest.mark.slow
    def test_laplace_variational_value(self):
        model = lq_model()
        cost = QuadraticCost(ModeCoefficient(model.grid, 1), level=1.0, beta=1.0)
        result = minimize_rate(lq_problem(target=TerminalCost(cost)))
        assert result.objective == pytest.approx(lq_laplace_value(1.0, 1.0, 1.0, 1.0, 1.0), rel=2e-3)

    def test_unreachable_target(self):
        result = minimize_rate(lq_problem(dt=0.01, sigma=0.0, max_doublings=2))
        assert not result.feasible
        assert result.I_value == np.inf

    def test_full_path_target_at_zero_cost(self):
        model = lq_model()
        skeleton = SkeletonProblem(model, ControlPath.zeros(1.0, 10, 1), np.ones(1), dt=0.01)
        target = FullPath(solve_skeleton(skeleton))
        result = minimize_rate(RateProblem(skeleton, target))
        assert result.feasible
        assert result.I_value == pytest.approx(0.0, abs=1e-12)

    def test_invalid_settings(self):
        with pytest.raises(ValueError):
            RateSettings(step_rule="newton")
        with pytest.raises(ValueError):
            RateSettings(penalty_w0=0.0)


class Test_LevelSet:
    def skeleton(self):
        model = ModelSpec.from_dict(
            {
                "grid": {"n_interior": 6},
                "slow": {"kind": "p_laplace", "p": 3.0},
                "coupling": {"kind": "linear", "c_slow": 0.0, "c_fast": 1.0},
                "fast": {"kind": "linear_ou", "lambda2": 1.0, "b": 1.0},
                "noise": {"n_modes": 2, "g1": {"sigma": 1.0}, "g2": {"sigma": 1.0}},
            }
        )
        return SkeletonProblem(model, ControlPath.zeros(0.5, 5, 2), model.grid.sine(1).values, dt=0.01)

    def test_zero_radius(self):
        report = level_set_sample(0.0, 10, self.skeleton())
        assert report.n_samples == 1
        assert report.diameter == 0.0
        assert report.sup_energy > 0

    def test_samples(self):
        report = level_set_sample(4.0, 6, self.skeleton(), seed=1)
        assert report.n_samples == 6
        assert report.blowups == 0
        assert report.diameter > 0
        assert np.isfinite(report.sup_energy)
        assert not report.findings

    def test_energy_bound_finding(self):
        report = level_set_sample(4.0, 3, self.skeleton(), C=1e-6)
        assert report.findings

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            level_set_sample(-1.0, 3, self.skeleton())

    def test_diameter_grows_with_radius(self):
        small = level_set_sample(1.0, 6, self.skeleton(), seed=1)
        large = level_set_sample(4.0, 6, self.skeleton(), seed=1)
        assert large.diameter >= small.diameter > 0
