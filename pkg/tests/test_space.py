from MultiscaleLDP.Space import (
    Grid,
    GridFunction,
    GridMismatchError,
    HMinus1Pivot,
    L2Pivot,
    LpNorm,
    MeanValue,
    ModeCoefficient,
    NodeValue,
    Path,
    QuadraticCost,
    W1pNorm,
    energy_functional,
    inner_h,
    inner_h_minus1,
    laplacian,
    norm_h,
    norm_h_minus1,
    norm_v1,
    path_metric,
)
from numpy.testing import assert_allclose, assert_almost_equal
import numpy as np
import pytest
import scipy.linalg


class Test_Grid:
    def test_spacing(self):
        assert Grid(1).h == 0.5
        assert_almost_equal(Grid(9, 2.0).h, 0.2)
        assert_allclose(Grid(3).nodes, [0.25, 0.5, 0.75])

    def test_invalid(self):
        with pytest.raises(ValueError):
            Grid(0)
        with pytest.raises(ValueError):
            Grid(4, -1.0)

    def test_check_trailing_shape(self):
        grid = Grid(4)
        grid.check(np.zeros((3, 4)))
        with pytest.raises(GridMismatchError):
            grid.check(np.zeros(5))


class Test_GridFunction:
    def test_non_finite(self):
        with pytest.raises(ValueError, match="node 1"):
            GridFunction(Grid(3), [0.0, np.nan, 1.0])

    def test_arithmetic(self):
        grid = Grid(3)
        u = grid.function([1.0, 2.0, 3.0])
        assert_allclose((u + u - 0.5 * u).values, [1.5, 3.0, 4.5])
        assert_allclose((-u).values, [-1.0, -2.0, -3.0])

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            Grid(3).zeros() + Grid(4).zeros()
        with pytest.raises(GridMismatchError):
            inner_h(Grid(3).zeros(), Grid(3, 2.0).zeros())


class Test_SpectralBasis:
    @pytest.mark.parametrize("n", [1, 2, 7, 16])
    def test_orthonormal(self, n):
        grid = Grid(n)
        V = grid.basis.vectors
        assert_allclose(grid.h * V @ V.T, np.eye(n), atol=1e-12)

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_eigenpairs(self, k):
        grid = Grid(8, 1.5)
        e = grid.basis.vectors[k - 1]
        assert_allclose(laplacian(e, grid.h), -grid.basis.eigenvalues[k - 1] * e, atol=1e-10)

    def test_coefficient_round_trip(self):
        grid = Grid(6)
        u = np.linspace(-1, 2, 6) ** 2
        assert_allclose(grid.basis.synthesize(grid.basis.coefficients(u)), u, atol=1e-12)

    def test_lambda1_approaches_continuum(self):
        assert abs(Grid(200).basis.lambda1 - np.pi**2) < 1e-3


class Test_Pivots:
    def test_l2_norm_of_sine(self):
        grid = Grid(5)
        assert_almost_equal(norm_h(grid.sine(2, -3.0)), 3.0)

    def test_h_minus1_norm_of_sine(self):
        grid = Grid(5)
        for k in range(1, 6):
            assert_almost_equal(norm_h_minus1(grid.sine(k)), 1 / np.sqrt(grid.basis.eigenvalues[k - 1]))

    @pytest.mark.parametrize("pivot_class", [L2Pivot, HMinus1Pivot])
    def test_riesz_represents_inner_product(self, pivot_class):
        grid = Grid(7)
        pivot = pivot_class(grid)
        rng = np.random.default_rng(0)
        u, w = rng.standard_normal((2, 7))
        assert_almost_equal(pivot.riesz(u) @ w, pivot.inner(u, w))

    def test_norms_along_last_axis(self):
        grid = Grid(4)
        values = np.stack([grid.sine(1).values, 2 * grid.sine(2).values])
        assert_allclose(L2Pivot(grid).norm(values), [1.0, 2.0])

    def test_w12_norm_is_energy(self):
        # h Σ |Du|² = ⟨−Δ_h u, u⟩
        grid = Grid(6)
        u = grid.sine(3, 2.0).values
        assert_almost_equal(W1pNorm(grid, 2)(u) ** 2, 4 * grid.basis.eigenvalues[2])

    def test_h_minus1_matches_tridiagonal_solve(self):
        grid = Grid(9, 1.3)
        rng = np.random.default_rng(2)
        # −Δ_h w = v with Dirichlet ends
        bands = np.zeros((3, 9))
        bands[0, 1:] = bands[2, :-1] = -1 / grid.h**2
        bands[1] = 2 / grid.h**2
        for _ in range(10):
            u, v = rng.standard_normal((2, 9))
            w = scipy.linalg.solve_banded((1, 1), bands, v)
            expected = grid.h * u @ w
            assert_allclose(inner_h_minus1(grid.function(u), grid.function(v)), expected, rtol=1e-10)

    def test_h_minus1_positive_definite(self):
        grid = Grid(7)
        rng = np.random.default_rng(3)
        for u in rng.standard_normal((50, 7)):
            assert inner_h_minus1(grid.function(u), grid.function(u)) > 0

    def test_v1_norm_single_node(self):
        assert_almost_equal(norm_v1(Grid(1).function([1.0]), 2), 2.0)

    @pytest.mark.parametrize("n", [1, 4, 11])
    def test_v1_norm_summation_by_parts(self, n):
        grid = Grid(n, 2.0)
        u = grid.function(np.random.default_rng(n).standard_normal(n))
        laplace_u = grid.function(-laplacian(u.values, grid.h))
        assert_allclose(norm_v1(u, 2) ** 2, inner_h(u, laplace_u), rtol=1e-10)

    def test_lp_norm(self):
        grid = Grid(3)
        assert_almost_equal(LpNorm(grid, 1)(np.array([1.0, -2.0, 3.0])), 1.5)
        with pytest.raises(ValueError):
            LpNorm(grid, 0.5)


class Test_PathMetric:
    def _constant(self, grid, u, times):
        return Path(grid, times, np.tile(u, (len(times), 1)))

    def test_zero_on_identical(self):
        grid = Grid(4)
        f = self._constant(grid, grid.sine(1).values, [0.0, 0.5, 1.0])
        assert path_metric(f, f) == 0.0

    def test_constant_gap(self):
        grid = Grid(5)
        times = np.linspace(0, 1, 11)
        f = self._constant(grid, np.zeros(5), times)
        g = self._constant(grid, grid.sine(1, 0.5).values, times)
        lam1 = grid.basis.lambda1
        assert_almost_equal(path_metric(f, g), 0.5 * (1 + np.sqrt(lam1)))
        assert_almost_equal(path_metric(f, g, norm_choice="c_only"), 0.5)

    def test_symmetric(self):
        grid = Grid(4)
        rng = np.random.default_rng(1)
        times = np.linspace(0, 1, 5)
        f = Path(grid, times, rng.standard_normal((5, 4)))
        g = Path(grid, times, rng.standard_normal((5, 4)))
        assert_almost_equal(path_metric(f, g, 3.0), path_metric(g, f, 3.0))

    def test_metric_axioms(self):
        grid = Grid(5)
        rng = np.random.default_rng(4)
        times = np.linspace(0, 1, 6)
        for _ in range(20):
            f, g, k = (Path(grid, times, rng.standard_normal((6, 5))) for _ in range(3))
            for norm_choice in ("full", "c_only"):
                fg = path_metric(f, g, norm_choice=norm_choice)
                assert fg > 0
                assert path_metric(f, f, norm_choice=norm_choice) == 0.0
                via_k = path_metric(f, k, norm_choice=norm_choice) + path_metric(k, g, norm_choice=norm_choice)
                assert fg <= via_k + 1e-12

    def test_time_grid_mismatch(self):
        grid = Grid(2)
        f = Path(grid, [0.0, 1.0], np.zeros((2, 2)))
        g = Path(grid, [0.0, 0.5, 1.0], np.zeros((3, 2)))
        with pytest.raises(GridMismatchError):
            path_metric(f, g)

    def test_invalid_norm_choice(self):
        grid = Grid(2)
        f = Path(grid, [0.0, 1.0], np.zeros((2, 2)))
        with pytest.raises(ValueError):
            path_metric(f, f, norm_choice="sup")

    def test_times_must_increase(self):
        with pytest.raises(ValueError):
            Path(Grid(2), [0.0, 0.0], np.zeros((2, 2)))


def test_energy_functional():
    grid = Grid(5)
    times = np.linspace(0, 2, 9)
    path = Path(grid, times, np.tile(grid.sine(1, 2.0).values, (9, 1)))
    expected = 4.0 + 0.5 * 2 * 4.0 * grid.basis.lambda1
    assert_almost_equal(energy_functional(path, theta1=0.5, gamma1=2.0), expected)


class Test_Functionals:
    def test_mode_coefficient(self):
        grid = Grid(6)
        g = ModeCoefficient(grid, 2)
        assert_almost_equal(g(grid.sine(2, 3.0).values), 3.0)
        assert_almost_equal(g(grid.sine(1, 3.0).values), 0.0)
        assert_allclose(g(np.stack([grid.sine(2).values] * 3)), [1.0, 1.0, 1.0])

    def test_single_node_mode_coefficient(self):
        grid = Grid(1)
        assert_almost_equal(ModeCoefficient(grid)(grid.sine(1, 1.7).values), 1.7)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ModeCoefficient(Grid(3), 4)
        with pytest.raises(ValueError):
            NodeValue(Grid(3), 3)

    def test_mean_value(self):
        grid = Grid(3)
        assert_almost_equal(MeanValue(grid)(np.ones(3)), 0.75)

    def test_quadratic_cost_gradient(self):
        grid = Grid(4)
        cost = QuadraticCost(ModeCoefficient(grid, 1), level=1.0, beta=2.0)
        x = np.array([0.3, -0.2, 0.5, 0.1])
        eps = 1e-6
        fd = np.array([(cost(x + eps * e) - cost(x - eps * e)) / (2 * eps) for e in np.eye(4)])
        assert_allclose(cost.gradient(x), fd, rtol=1e-6, atol=1e-9)

    def test_quadratic_cost_needs_positive_beta(self):
        with pytest.raises(ValueError):
            QuadraticCost(MeanValue(Grid(2)), 0.0, beta=0.0)
