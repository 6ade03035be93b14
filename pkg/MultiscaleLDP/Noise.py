from dataclasses import dataclass, field
from pathlib import Path as FilePath
from typing import Literal, Union

import numpy as np
import polars as pl
from numpy.typing import ArrayLike

from .Space import Grid

__all__ = [
    "NoiseTruncation",
    "ControlPath",
    "SeedSpec",
    "PURPOSES",
    "control_energy",
    "project_to_ball",
    "wiener_increments",
]

# substream families; the auxiliary process reuses "trajectory" so it sees the same W
PURPOSES = {
    "trajectory": 0,
    "frozen": 1,
    "replica": 2,
    "control_sample": 3,
    "check": 4,
}
Purpose = Literal["trajectory", "frozen", "replica", "control_sample", "check"]


@dataclass(frozen=True)
class NoiseTruncation:
    """U spanned by the first n_modes sine modes of the slow grid."""

    grid: Grid
    n_modes: int

    def __post_init__(self):
        if int(self.n_modes) != self.n_modes or not 1 <= self.n_modes <= self.grid.n_interior:
            raise ValueError(f"n_modes must lie in 1..{self.grid.n_interior}, got {self.n_modes}.")

    @property
    def basis(self) -> np.ndarray:
        return self.grid.basis.vectors[: self.n_modes]


@dataclass
class ControlPath:
    """
    Piecewise-constant control: on [times[j], times[j+1]) φ is the U-vector with
    mode coefficients coefficients[j].
    """

    times: np.ndarray
    coefficients: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.coefficients = np.atleast_2d(np.asarray(self.coefficients, dtype=float))
        if self.times.size < 2 or self.times[0] != 0.0:
            raise ValueError("Control time grid must start at 0 and hold at least one segment.")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("Control times must be strictly increasing.")
        if self.coefficients.shape[0] != self.times.size - 1:
            raise ValueError(
                f"{self.times.size - 1} control segments but {self.coefficients.shape[0]} coefficient rows."
            )
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("Control coefficients must be finite.")

    @classmethod
    def zeros(cls, T: float, n_segments: int, n_modes: int) -> "ControlPath":
        return cls(np.linspace(0.0, T, n_segments + 1), np.zeros((n_segments, n_modes)))

    @classmethod
    def constant(cls, T: float, n_segments: int, value: ArrayLike) -> "ControlPath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(np.linspace(0.0, T, n_segments + 1), np.tile(value, (n_segments, 1)))

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_segments(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_modes(self) -> int:
        return self.coefficients.shape[1]

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.times)

    def energy(self) -> float:
        """½∫₀ᵀ‖φ_s‖² ds, exact for piecewise-constant paths."""
        return 0.5 * float(np.sum(self.durations * np.sum(self.coefficients**2, axis=1)))

    def with_coefficients(self, coefficients: ArrayLike) -> "ControlPath":
        return ControlPath(self.times.copy(), np.reshape(coefficients, self.coefficients.shape))

    def segment_of(self, t: ArrayLike) -> np.ndarray:
        """Index of the segment containing each time (the last segment is closed on the right)."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.n_segments - 1)

    def on_steps(self, dt: float, n_steps: int) -> np.ndarray:
        """Coefficients seen by each Euler step [k dt, (k+1) dt), sampled at the step midpoint."""
        return self.coefficients[self.segment_of((np.arange(n_steps) + 0.5) * dt)]

    def to_frame(self) -> pl.DataFrame:
        data = {"t": self.times}
        for k in range(self.n_modes):
            data[f"c_{k + 1}"] = np.append(self.coefficients[:, k], np.nan)
        return pl.DataFrame(data).with_columns([pl.col(f"c_{k + 1}").fill_nan(None) for k in range(self.n_modes)])

    def to_csv(self, path: Union[str, FilePath]):
        self.to_frame().write_csv(path)

    @classmethod
    def from_csv(cls, path: Union[str, FilePath]) -> "ControlPath":
        df = pl.read_csv(path)
        if "t" not in df.columns:
            raise ValueError(f"{path}: control CSV needs a 't' column.")
        mode_columns = sorted((c for c in df.columns if c.startswith("c_")), key=lambda c: int(c[2:]))
        if not mode_columns:
            raise ValueError(f"{path}: control CSV has no coefficient columns c_1..c_K.")
        times = df["t"].to_numpy()
        coefficients = df.select(mode_columns).to_numpy()[:-1]
        return cls(times, coefficients)


def control_energy(phi: ControlPath) -> float:
    return phi.energy()


def project_to_ball(phi: ControlPath, M: float) -> ControlPath:
    """Rescale φ onto S_M = {∫‖φ‖² ≤ M} when it lies outside."""
    if not M > 0:
        raise ValueError(f"Ball radius M must be positive, got {M}.")
    squared = 2 * phi.energy()
    if squared <= M:
        return phi
    return phi.with_coefficients(phi.coefficients * np.sqrt(M / squared))


@dataclass(frozen=True)
class SeedSpec:
    """
    Counter-based seeding: (master_seed, purpose, index) maps to its own Philox
    stream, independent of how work is split across threads.
    """

    master_seed: int

    def __post_init__(self):
        if int(self.master_seed) != self.master_seed or not 0 <= self.master_seed < 2**64:
            raise ValueError(f"Seed must be an integer in [0, 2^64), got {self.master_seed}.")

    def stream(self, index: int, purpose: Purpose = "trajectory") -> np.random.Generator:
        if purpose not in PURPOSES:
            raise ValueError(f"Unsupported stream purpose: {purpose}")
        sequence = np.random.SeedSequence(int(self.master_seed), spawn_key=(PURPOSES[purpose], int(index)))
        return np.random.Generator(np.random.Philox(sequence))


def wiener_increments(trunc: NoiseTruncation, dt: float, n_steps: int, stream: np.random.Generator) -> np.ndarray:
    """(n_steps, n_modes) array of independent N(0, dt) increments."""
    if not dt > 0:
        raise ValueError(f"Time step must be positive, got {dt}.")
    return np.sqrt(dt) * stream.standard_normal((n_steps, trunc.n_modes))
