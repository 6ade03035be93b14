from MultiscaleLDP.Noise import (
    ControlPath,
    NoiseTruncation,
    SeedSpec,
    control_energy,
    project_to_ball,
    wiener_increments,
)
from MultiscaleLDP.Space import Grid
from numpy.testing import assert_allclose, assert_almost_equal
import numpy as np
import pytest


class Test_SeedSpec:
    def test_reproducible(self):
        a = SeedSpec(7).stream(3).standard_normal(5)
        b = SeedSpec(7).stream(3).standard_normal(5)
        assert_allclose(a, b)

    def test_streams_are_distinct(self):
        seeds = SeedSpec(7)
        draws = [
            seeds.stream(0).standard_normal(),
            seeds.stream(1).standard_normal(),
            seeds.stream(0, "frozen").standard_normal(),
            SeedSpec(8).stream(0).standard_normal(),
        ]
        assert len(set(draws)) == 4

    def test_invalid(self):
        with pytest.raises(ValueError):
            SeedSpec(-1)
        with pytest.raises(ValueError):
            SeedSpec(0).stream(0, "auxiliary")


class Test_ControlPath:
    def test_energy(self):
        phi = ControlPath.constant(2.0, 4, [1.0, 2.0])
        assert_almost_equal(phi.energy(), 5.0)
        assert control_energy(ControlPath.zeros(1.0, 3, 2)) == 0.0

    def test_segments(self):
        phi = ControlPath([0.0, 0.5, 1.0], [[1.0], [2.0]])
        assert phi.segment_of([0.0, 0.49, 0.5, 1.0]).tolist() == [0, 0, 1, 1]
        assert_allclose(phi.on_steps(0.25, 4)[:, 0], [1.0, 1.0, 2.0, 2.0])

    def test_invalid(self):
        with pytest.raises(ValueError):
            ControlPath([0.1, 1.0], [[0.0]])
        with pytest.raises(ValueError):
            ControlPath([0.0, 0.5, 0.5], [[0.0], [0.0]])
        with pytest.raises(ValueError):
            ControlPath([0.0, 1.0], [[0.0], [1.0]])
        with pytest.raises(ValueError):
            ControlPath([0.0, 1.0], [[np.inf]])

    def test_csv(self, tmp_path):
        phi = ControlPath([0.0, 0.3, 1.0], [[1.0, -0.5], [0.25, 2.0]])
        phi.to_csv(tmp_path / "phi.csv")
        loaded = ControlPath.from_csv(tmp_path / "phi.csv")
        assert_allclose(loaded.times, phi.times)
        assert_allclose(loaded.coefficients, phi.coefficients)

    def test_csv_needs_coefficients(self, tmp_path):
        (tmp_path / "phi.csv").write_text("t\n0.0\n1.0\n")
        with pytest.raises(ValueError, match="c_1"):
            ControlPath.from_csv(tmp_path / "phi.csv")


def test_project_to_ball():
    phi = ControlPath.constant(1.0, 2, [3.0])
    projected = project_to_ball(phi, 4.0)
    assert_almost_equal(2 * projected.energy(), 4.0)
    assert project_to_ball(phi, 100.0) is phi
    with pytest.raises(ValueError):
        project_to_ball(phi, 0.0)


class Test_Increments:
    def test_statistics(self):
        trunc = NoiseTruncation(Grid(4), 2)
        dW = wiener_increments(trunc, 0.01, 20000, SeedSpec(1).stream(0))
        assert dW.shape == (20000, 2)
        assert_allclose(dW.var(axis=0), 0.01, rtol=0.05)
        assert abs(dW.mean()) < 5e-3

    def test_truncation_bounds(self):
        with pytest.raises(ValueError):
            NoiseTruncation(Grid(3), 4)
        with pytest.raises(ValueError):
            NoiseTruncation(Grid(3), 0)
        assert NoiseTruncation(Grid(3), 2).basis.shape == (2, 3)

    def test_positive_step(self):
        with pytest.raises(ValueError):
            wiener_increments(NoiseTruncation(Grid(2), 1), 0.0, 3, SeedSpec(0).stream(0))
