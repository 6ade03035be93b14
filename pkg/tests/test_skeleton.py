from MultiscaleLDP.Averaging import AveragedDrift
from MultiscaleLDP.Models import ModelSpec
from MultiscaleLDP.Noise import ControlPath
from MultiscaleLDP.Skeleton import (
    SkeletonBlowUpError,
    SkeletonProblem,
    _adjoint,
    _forward,
    solve_forward_map,
    solve_skeleton,
)
from numpy.testing import assert_allclose
import numpy as np
import pytest


def make_model(slow=None, coupling=None, g1=None, n=6):
    return ModelSpec.from_dict(
        {
            "grid": {"n_interior": n},
            "slow": slow or {"kind": "linear", "diffusivity": 1.0},
            "coupling": coupling or {"kind": "linear", "c_slow": 0.0, "c_fast": 1.0},
            "fast": {"kind": "linear_ou", "lambda2": 1.0, "b": 1.0},
            "noise": {"n_modes": 2, "g1": g1 or {"sigma": 1.0}, "g2": {"sigma": 1.0}},
        }
    )


class Test_SkeletonProblem:
    def test_control_grid_must_align(self):
        model = make_model()
        with pytest.raises(ValueError, match="divide"):
            SkeletonProblem(model, ControlPath.zeros(1.0, 3, 2), np.zeros(6), dt=0.1)

    def test_control_modes(self):
        model = make_model()
        with pytest.raises(ValueError, match="modes"):
            SkeletonProblem(model, ControlPath.zeros(1.0, 4, 3), np.zeros(6), dt=0.05)

    def test_step_grid(self):
        prob = SkeletonProblem(make_model(), ControlPath([0.0, 0.2, 1.0], np.zeros((2, 2))), np.zeros(6), dt=0.1)
        assert prob.n_steps == 10
        assert prob.steps_per_segment.tolist() == [2, 8]
        assert_allclose(prob.times, np.linspace(0, 1, 11))
        assert isinstance(prob.drift, AveragedDrift)


class Test_Solve:
    def test_uncontrolled_decay(self):
        # F̄(x) = x, so the first mode decays at rate λ₁ − 1
        model = make_model()
        e1 = model.grid.sine(1).values
        prob = SkeletonProblem(model, ControlPath.zeros(0.1, 1, 2), e1, dt=1e-4, record_every=100)
        path = solve_skeleton(prob)
        rate = model.grid.basis.lambda1 - 1
        assert_allclose(path.values[-1], np.exp(-rate * 0.1) * e1, rtol=2e-3, atol=1e-8)
        assert path.times.size == 11

    def test_constant_control(self):
        model = make_model()
        e1 = model.grid.sine(1).values
        phi = ControlPath.constant(0.2, 2, [2.0, 0.0])
        path = solve_skeleton(SkeletonProblem(model, phi, np.zeros(6), dt=1e-4))
        a = model.grid.basis.lambda1 - 1
        assert_allclose(path.values[-1], 2.0 * (1 - np.exp(-a * 0.2)) / a * e1, rtol=2e-3, atol=1e-8)

    def test_forward_map_swaps_control(self):
        model = make_model()
        template = SkeletonProblem(model, ControlPath.zeros(0.2, 2, 2), np.zeros(6), dt=0.01)
        phi = ControlPath.constant(0.2, 2, [1.0, -1.0])
        assert_allclose(solve_forward_map(phi, template).values, solve_skeleton(template.with_control(phi)).values)

    def test_blow_up(self):
        model = make_model(slow={"kind": "linear", "diffusivity": 1.0, "shift": -200.0})
        prob = SkeletonProblem(model, ControlPath.zeros(1.0, 1, 2), np.full(6, 0.1), dt=1e-3)
        with pytest.raises(SkeletonBlowUpError) as e:
            solve_skeleton(prob)
        assert 0 < e.value.time < 1.0


@pytest.mark.parametrize(
    "slow, coupling, g1",
    [
        (None, None, None),
        (
            {"kind": "p_laplace", "p": 3.0, "q": 2.0, "c": 0.5},
            None,
            {"kind": "state_lipschitz", "sigma": 1.0, "lip": 0.3},
        ),
        (
            {"kind": "burgers", "f_lipschitz": 0.5, "h_coeffs": [0.0, 0.0, -1.0]},
            {"kind": "bounded_lipschitz", "c_slow": 0.2, "c_fast": 1.0, "saturation": 0.5},
            None,
        ),
    ],
)
def test_adjoint_matches_finite_differences(slow, coupling, g1):
    model = make_model(slow, coupling, g1, n=5)
    x0 = 0.5 * model.grid.sine(1).values
    prob = SkeletonProblem(model, ControlPath.zeros(0.3, 3, 2), x0, dt=0.01)
    rng = np.random.default_rng(0)
    c = rng.standard_normal((3, 2))
    w = rng.standard_normal(5)
    p = rng.standard_normal((prob.n_steps + 1, 5))

    def loss(coefficients):
        states = _forward(prob, coefficients)
        return float(states[-1] @ w + np.sum(states[1:] * p[1:]))

    gradient = _adjoint(prob, _forward(prob, c), w, p, c)
    eps = 1e-5
    fd = np.zeros_like(c)
    for idx in np.ndindex(*c.shape):
        e = np.zeros_like(c)
        e[idx] = eps
        fd[idx] = (loss(c + e) - loss(c - e)) / (2 * eps)
    assert_allclose(gradient, fd, rtol=1e-4, atol=1e-6)


class Test_Convergence:
    def terminal(self, model, x0, phi, dt):
        return solve_skeleton(SkeletonProblem(model, phi, x0, dt=dt)).values[-1]

    def test_variation_of_constants(self):
        model = make_model(coupling={"kind": "linear", "c_slow": 0.0, "c_fast": 0.0})
        basis = model.grid.basis
        mu = model.slow.symbol()[0]
        T, c = 0.2, 2.0
        phi = ControlPath.constant(T, 2, [c, 0.0])
        x0 = model.grid.sine(1).values
        exact = (np.exp(-mu * T) + c * (1 - np.exp(-mu * T)) / mu) * x0
        fine = self.terminal(model, x0, phi, 1e-4)
        coarse = self.terminal(model, x0, phi, 2e-4)
        # implicit Euler is first order; one Richardson step recovers the closed form
        assert_allclose(fine, exact, atol=1e-3)
        assert_allclose(2 * fine - coarse, exact, atol=1e-6)
        assert_allclose(basis.coefficients(fine)[1:], 0.0, atol=1e-12)

    def test_refinement_order(self):
        model = make_model()
        x0 = model.grid.sine(1).values + 0.5 * model.grid.sine(2).values
        phi = ControlPath.constant(0.2, 2, [1.0, -0.5])
        states = [self.terminal(model, x0, phi, dt) for dt in (2e-3, 1e-3, 5e-4)]
        pivot = model.pivot
        order = np.log2(pivot.norm(states[0] - states[1]) / pivot.norm(states[1] - states[2]))
        assert order >= 0.9
