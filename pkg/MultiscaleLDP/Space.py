from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal, Optional, Union

import numpy as np
from numpy.typing import ArrayLike

__all__ = [
    "GridMismatchError",
    "Grid",
    "GridFunction",
    "SpectralBasis",
    "Pivot",
    "L2Pivot",
    "HMinus1Pivot",
    "VNorm",
    "W1pNorm",
    "LpNorm",
    "Path",
    "Functional",
    "ModeCoefficient",
    "NodeValue",
    "MeanValue",
    "QuadraticCost",
    "laplacian",
    "forward_difference",
    "backward_divergence",
    "central_difference",
    "inner_h",
    "norm_h",
    "norm_v1",
    "norm_lp",
    "inner_h_minus1",
    "norm_h_minus1",
    "path_metric",
    "energy_functional",
    "as_values",
]


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """
    Uniform grid on (0, L) with homogeneous Dirichlet boundary. Only the
    interior nodes x_i = i*h, i = 1..n_interior, are stored.
    """

    n_interior: int
    length: float = 1.0

    def __post_init__(self):
        if int(self.n_interior) != self.n_interior or self.n_interior < 1:
            raise ValueError(f"n_interior must be a positive integer, got {self.n_interior}.")
        if not np.isfinite(self.length) or self.length <= 0:
            raise ValueError(f"Domain length must be positive, got {self.length}.")

    @property
    def h(self) -> float:
        return self.length / (self.n_interior + 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        return self.h * np.arange(1, self.n_interior + 1)

    @cached_property
    def basis(self) -> "SpectralBasis":
        return SpectralBasis(self)

    def zeros(self) -> "GridFunction":
        return GridFunction(self, np.zeros(self.n_interior))

    def function(self, values: ArrayLike) -> "GridFunction":
        return GridFunction(self, values)

    def sine(self, mode: int = 1, amplitude: float = 1.0) -> "GridFunction":
        return GridFunction(self, amplitude * self.basis.vectors[mode - 1])

    def check(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.n_interior:
            raise GridMismatchError(f"Expected {self.n_interior} interior values, got trailing shape {values.shape}.")
        return values


@dataclass(frozen=True)
class GridFunction:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size != self.grid.n_interior:
            raise GridMismatchError(f"Got {values.size} values for a grid with {self.grid.n_interior} nodes.")
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise ValueError(f"GridFunction value at node {bad[0]} is not finite.")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def _same_grid(self, other: "GridFunction"):
        if other.grid != self.grid:
            raise GridMismatchError(f"Grid mismatch: {self.grid} vs {other.grid}.")

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self._same_grid(other)
        return GridFunction(self.grid, self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self._same_grid(other)
        return GridFunction(self.grid, self.values - other.values)

    def __mul__(self, scalar: float) -> "GridFunction":
        return GridFunction(self.grid, scalar * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "GridFunction":
        return GridFunction(self.grid, -self.values)


class SpectralBasis:
    """
    Eigenpairs of the discrete Dirichlet Laplacian -Δ_h.

    Eigenvectors e_k(x_i) = sqrt(2/L) sin(k π x_i / L) are orthonormal in the
    discrete L² product h Σ u_i v_i, with eigenvalues λ_k = (4/h²) sin²(kπh/2L).
    Coefficients are û_k = h Σ_i u_i e_k(x_i).
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        k = np.arange(1, grid.n_interior + 1)
        h, L = grid.h, grid.length
        self.eigenvalues = (4 / h**2) * np.sin(k * np.pi * h / (2 * L)) ** 2
        self.eigenvalues.flags.writeable = False
        # row k-1 holds e_k on the interior nodes
        self.vectors = np.sqrt(2 / L) * np.sin(np.outer(k, grid.nodes) * np.pi / L)
        self.vectors.flags.writeable = False

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0])

    def coefficients(self, values: ArrayLike) -> np.ndarray:
        return self.grid.h * np.asarray(values, dtype=float) @ self.vectors.T

    def synthesize(self, coefficients: ArrayLike) -> np.ndarray:
        coefficients = np.asarray(coefficients, dtype=float)
        n_modes = coefficients.shape[-1]
        return coefficients @ self.vectors[:n_modes]

    def apply_power(self, values: ArrayLike, power: float) -> np.ndarray:
        """Spectral calculus: Σ_k λ_k^power û_k e_k."""
        return self.synthesize(self.coefficients(values) * self.eigenvalues**power)

    def modewise(self, values: ArrayLike, multipliers: np.ndarray) -> np.ndarray:
        return self.synthesize(self.coefficients(values) * multipliers)


def laplacian(values: ArrayLike, h: float) -> np.ndarray:
    """Δ_h with zero Dirichlet padding, along the last axis."""
    u = np.asarray(values, dtype=float)
    padded = np.zeros(u.shape[:-1] + (u.shape[-1] + 2,))
    padded[..., 1:-1] = u
    return (padded[..., 2:] - 2 * u + padded[..., :-2]) / h**2


def forward_difference(values: ArrayLike, h: float) -> np.ndarray:
    """The n_interior + 1 forward differences (u_{i+1} - u_i)/h, boundary values zero."""
    u = np.asarray(values, dtype=float)
    padded = np.zeros(u.shape[:-1] + (u.shape[-1] + 2,))
    padded[..., 1:-1] = u
    return np.diff(padded, axis=-1) / h


def backward_divergence(flux: ArrayLike, h: float) -> np.ndarray:
    """-Dᵀ flux: maps edge values (n+1) back to interior nodes (n)."""
    flux = np.asarray(flux, dtype=float)
    return np.diff(flux, axis=-1) / h


def central_difference(values: ArrayLike, h: float) -> np.ndarray:
    u = np.asarray(values, dtype=float)
    padded = np.zeros(u.shape[:-1] + (u.shape[-1] + 2,))
    padded[..., 1:-1] = u
    return (padded[..., 2:] - padded[..., :-2]) / (2 * h)


class Pivot(ABC):
    """The pivot space H of a Gelfand triple, acting on arrays along the last axis."""

    name: str

    def __init__(self, grid: Grid):
        self.grid = grid

    @abstractmethod
    def inner(self, u: ArrayLike, v: ArrayLike) -> np.ndarray:
        ...

    @abstractmethod
    def riesz(self, u: ArrayLike) -> np.ndarray:
        """Euclidean gradient of ½‖u‖²_H, so that ⟨u, w⟩_H = riesz(u)·w."""
        ...

    def norm(self, u: ArrayLike) -> np.ndarray:
        return np.sqrt(np.maximum(self.inner(u, u), 0.0))

    def mode_norm_sq(self) -> np.ndarray:
        """‖e_k‖²_H for every sine mode."""
        return np.ones(self.grid.n_interior)


class L2Pivot(Pivot):
    name = "l2"

    def inner(self, u, v):
        return self.grid.h * np.sum(np.asarray(u, dtype=float) * np.asarray(v, dtype=float), axis=-1)

    def riesz(self, u):
        return self.grid.h * np.asarray(u, dtype=float)


class HMinus1Pivot(Pivot):
    name = "h_minus1"

    def __init__(self, grid: Grid):
        super().__init__(grid)
        self.basis = grid.basis

    def inner(self, u, v):
        uh = self.basis.coefficients(u)
        vh = self.basis.coefficients(v)
        return np.sum(uh * vh / self.basis.eigenvalues, axis=-1)

    def riesz(self, u):
        return self.grid.h * self.basis.apply_power(u, -1.0)

    def mode_norm_sq(self):
        return 1 / self.basis.eigenvalues


class VNorm(ABC):
    """Norm of the reflexive space V, with exponent gamma used in energy integrals."""

    def __init__(self, grid: Grid, p: float):
        if p < 1:
            raise ValueError(f"Norm exponent must satisfy p >= 1, got {p}.")
        self.grid = grid
        self.p = float(p)

    @abstractmethod
    def __call__(self, u: ArrayLike) -> np.ndarray:
        ...


class W1pNorm(VNorm):
    name = "w1p"

    def __call__(self, u):
        Du = forward_difference(u, self.grid.h)
        return (self.grid.h * np.sum(np.abs(Du) ** self.p, axis=-1)) ** (1 / self.p)


class LpNorm(VNorm):
    name = "lp"

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return (self.grid.h * np.sum(np.abs(u) ** self.p, axis=-1)) ** (1 / self.p)


def _pair(u: GridFunction, v: GridFunction):
    if u.grid != v.grid:
        raise GridMismatchError(f"Grid mismatch: {u.grid} vs {v.grid}.")
    return u.values, v.values


def inner_h(u: GridFunction, v: GridFunction) -> float:
    a, b = _pair(u, v)
    return float(u.grid.h * np.dot(a, b))


def norm_h(u: GridFunction) -> float:
    return float(np.sqrt(inner_h(u, u)))


def norm_v1(u: GridFunction, p: float) -> float:
    return float(W1pNorm(u.grid, p)(u.values))


def norm_lp(u: GridFunction, p: float) -> float:
    return float(LpNorm(u.grid, p)(u.values))


def inner_h_minus1(u: GridFunction, v: GridFunction, basis: Optional[SpectralBasis] = None) -> float:
    a, b = _pair(u, v)
    if basis is not None and basis.grid != u.grid:
        raise GridMismatchError("Spectral basis and grid functions live on different grids.")
    basis = basis or u.grid.basis
    return float(np.sum(basis.coefficients(a) * basis.coefficients(b) / basis.eigenvalues))


def norm_h_minus1(u: GridFunction, basis: Optional[SpectralBasis] = None) -> float:
    return float(np.sqrt(inner_h_minus1(u, u, basis)))


@dataclass
class Path:
    """A grid-valued path recorded on an increasing time grid; values has shape (n_times, n_interior)."""

    grid: Grid = field(repr=False)
    times: np.ndarray
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = self.grid.check(np.atleast_2d(self.values))
        if self.values.shape[0] != self.times.size:
            raise ValueError(f"Path has {self.times.size} times but {self.values.shape[0]} snapshots.")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("Path times must be strictly increasing.")

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def terminal(self) -> GridFunction:
        return GridFunction(self.grid, self.values[-1])

    def at(self, index: int) -> GridFunction:
        return GridFunction(self.grid, self.values[index])

    def __sub__(self, other: "Path") -> "Path":
        _check_same_path_grid(self, other)
        return Path(self.grid, self.times, self.values - other.values)


def _check_same_path_grid(f: Path, g: Path):
    if f.grid != g.grid:
        raise GridMismatchError(f"Paths live on different spatial grids: {f.grid} vs {g.grid}.")
    if f.times.shape != g.times.shape or not np.allclose(f.times, g.times, rtol=0, atol=1e-12):
        raise GridMismatchError("Paths are recorded on different time grids.")


def path_metric(
    f: Path,
    g: Path,
    gamma1: float = 2.0,
    norm_choice: Literal["full", "c_only"] = "full",
    pivot: Optional[Pivot] = None,
    v_norm: Optional[VNorm] = None,
) -> float:
    """
    sup_t ‖f_t − g_t‖_H + (∫₀ᵀ ‖f_t − g_t‖_V^γ₁ dt)^{1/γ₁}, left-endpoint rule in time.

    Args:
        gamma1: exponent of the time-integrated V-part.
        norm_choice: "c_only" drops the V-part (metric of C([0,T]; H)).
        pivot: H-norm, discrete L² when omitted.
        v_norm: V-norm, W^{1,γ₁} when omitted.
    """
    _check_same_path_grid(f, g)
    if norm_choice not in ("full", "c_only"):
        raise ValueError(f"Unsupported norm choice {norm_choice}.")
    pivot = pivot or L2Pivot(f.grid)
    diff = f.values - g.values
    sup_part = float(np.max(pivot.norm(diff)))
    if norm_choice == "c_only" or f.times.size < 2:
        return sup_part
    v_norm = v_norm or W1pNorm(f.grid, gamma1)
    integrand = v_norm(diff[:-1]) ** gamma1
    integral = float(np.sum(np.diff(f.times) * integrand))
    return sup_part + integral ** (1 / gamma1)


def energy_functional(
    path: Path, theta1: float, gamma1: float, pivot: Optional[Pivot] = None, v_norm: Optional[VNorm] = None
) -> float:
    """sup_t ‖X_t‖²_H + θ₁ ∫₀ᵀ ‖X_t‖_V^γ₁ dt, left-endpoint rule."""
    pivot = pivot or L2Pivot(path.grid)
    v_norm = v_norm or W1pNorm(path.grid, gamma1)
    sup_part = float(np.max(pivot.norm(path.values) ** 2))
    if path.times.size < 2:
        return sup_part
    integral = float(np.sum(np.diff(path.times) * v_norm(path.values[:-1]) ** gamma1))
    return sup_part + theta1 * integral


class Functional(ABC):
    """Scalar functional g of a grid state with Euclidean gradient, evaluated along the last axis."""

    lipschitz: float = np.inf

    def __init__(self, grid: Grid):
        self.grid = grid

    @abstractmethod
    def __call__(self, values: ArrayLike) -> np.ndarray:
        ...

    @abstractmethod
    def gradient(self, values: ArrayLike) -> np.ndarray:
        ...


class ModeCoefficient(Functional):
    """g(x) = ⟨x, e_k⟩, the k-th sine coefficient."""

    def __init__(self, grid: Grid, mode: int = 1):
        super().__init__(grid)
        if not 1 <= mode <= grid.n_interior:
            raise ValueError(f"Mode {mode} outside 1..{grid.n_interior}.")
        self.mode = mode
        self._weights = grid.h * grid.basis.vectors[mode - 1]
        self.lipschitz = 1.0

    def __call__(self, values):
        return np.asarray(values, dtype=float) @ self._weights

    def gradient(self, values):
        return np.broadcast_to(self._weights, np.shape(values)).copy()


class NodeValue(Functional):
    def __init__(self, grid: Grid, node: int):
        super().__init__(grid)
        if not 0 <= node < grid.n_interior:
            raise ValueError(f"Node {node} outside 0..{grid.n_interior - 1}.")
        self.node = node
        self.lipschitz = 1 / np.sqrt(grid.h)

    def __call__(self, values):
        return np.asarray(values, dtype=float)[..., self.node]

    def gradient(self, values):
        grad = np.zeros(np.shape(values))
        grad[..., self.node] = 1.0
        return grad


class MeanValue(Functional):
    """g(x) = h Σ x_i, the discrete integral of the state."""

    def __init__(self, grid: Grid):
        super().__init__(grid)
        self.lipschitz = np.sqrt(grid.length)

    def __call__(self, values):
        return self.grid.h * np.sum(np.asarray(values, dtype=float), axis=-1)

    def gradient(self, values):
        return np.full(np.shape(values), self.grid.h)


class QuadraticCost(Functional):
    """h(x) = β (g(x) − a)², a smooth terminal cost built from another functional."""

    def __init__(self, base: Functional, level: float, beta: float = 1.0):
        super().__init__(base.grid)
        if beta <= 0:
            raise ValueError(f"Cost weight beta must be positive, got {beta}.")
        self.base = base
        self.level = level
        self.beta = beta

    def __call__(self, values):
        return self.beta * (self.base(values) - self.level) ** 2

    def gradient(self, values):
        residual = self.base(values) - self.level
        return 2 * self.beta * np.asarray(residual)[..., None] * self.base.gradient(values)


Vector = Union[GridFunction, np.ndarray]


def as_values(u: Vector) -> np.ndarray:
    if isinstance(u, GridFunction):
        return u.values
    return np.asarray(u, dtype=float)
