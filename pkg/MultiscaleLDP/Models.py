import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from numpy.typing import ArrayLike

from .Space import (
    Grid,
    HMinus1Pivot,
    L2Pivot,
    LpNorm,
    Pivot,
    VNorm,
    W1pNorm,
    as_values,
    backward_divergence,
    central_difference,
    forward_difference,
    laplacian,
)

logger = logging.getLogger(__name__)

__all__ = [
    "NonFiniteOperatorError",
    "ModelSpecError",
    "SlowConstants",
    "SlowOperator",
    "LinearOperator",
    "PorousMedia",
    "PLaplace",
    "FastDiffusion",
    "Burgers",
    "CouplingF1",
    "LinearCoupling",
    "BoundedLipschitzCoupling",
    "FastDrift",
    "LinearOU",
    "ReactionDiffusion",
    "SlowNoise",
    "ConstantDiagonalNoise",
    "StateLipschitzNoise",
    "FastNoise",
    "NoiseMaps",
    "ModelSpec",
    "apply_A",
    "apply_F2",
]

NEWTON_TOL = 1e-13
NEWTON_MAX_ITER = 60


class NonFiniteOperatorError(ArithmeticError):
    def __init__(self, message: str, node: int):
        super().__init__(message)
        self.node = node


class ModelSpecError(ValueError):
    def __init__(self, message: str, path: Tuple[str, ...] = ()):
        super().__init__(message)
        self.path = path


def _checked(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        node = int(np.argwhere(~np.isfinite(values))[0][-1])
        raise NonFiniteOperatorError(f"{what} is not finite at node {node}.", node)
    return values


def _signed_power(s: np.ndarray, exponent: float) -> np.ndarray:
    # |s|^{exponent-1} s, continuous at 0
    return np.sign(s) * np.abs(s) ** exponent


def _difference_matrix(grid: Grid) -> np.ndarray:
    n = grid.n_interior
    return (np.eye(n + 1, n) - np.eye(n + 1, n, k=-1)) / grid.h


@dataclass
class SlowConstants:
    """Declared constants of the local monotonicity, growth and coercivity hypotheses."""

    theta1: float
    K: float
    rho: Callable[[np.ndarray], float] = field(repr=False)
    rho_description: str
    growth_C: float
    growth_beta1: float
    coercive_theta1: Optional[float] = None
    coercive_K: Optional[float] = None


class SlowOperator(ABC):
    """
    Slow drift A: V₁ → V₁*, split as A = principal + lower. The principal part is
    integrated implicitly, the lower-order part explicitly.
    """

    kind: str
    gamma1: float
    uses_a4: bool = False
    pivot_kind: Literal["l2", "h_minus1"] = "l2"
    linear_principal: bool = True

    def __init__(self, grid: Grid):
        self.grid = grid
        self.basis = grid.basis

    @cached_property
    def pivot(self) -> Pivot:
        return HMinus1Pivot(self.grid) if self.pivot_kind == "h_minus1" else L2Pivot(self.grid)

    @property
    @abstractmethod
    def v_norm(self) -> VNorm:
        ...

    @abstractmethod
    def principal(self, u: np.ndarray) -> np.ndarray:
        ...

    def lower(self, u: np.ndarray) -> np.ndarray:
        return np.zeros_like(u)

    def lower_vjp(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        return np.zeros_like(w)

    def __call__(self, u: ArrayLike) -> np.ndarray:
        u = self.grid.check(u)
        with np.errstate(over="ignore", invalid="ignore"):
            value = self.principal(u) + self.lower(u)
        return _checked(value, f"{self.kind} operator")

    # mode multipliers μ_k with principal(u) = -Σ μ_k û_k e_k, linear principal parts only
    def symbol(self) -> np.ndarray:
        raise NotImplementedError(f"{self.kind} has no linear principal part.")

    def principal_jacobian(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def implicit_solve(self, b: np.ndarray, dt: float, guess: Optional[np.ndarray] = None) -> np.ndarray:
        """Solve Z − dt·principal(Z) = b row-wise."""
        if self.linear_principal:
            return self.basis.modewise(b, 1 / (1 + dt * self.symbol()))
        return self._newton(b, dt, guess)

    def implicit_solve_transpose(self, Z: np.ndarray, dt: float, cotangent: np.ndarray) -> np.ndarray:
        """Apply (I − dt·J_principal(Z))^{-T} to a cotangent; Z is the implicit solution."""
        if self.linear_principal:
            return self.basis.modewise(cotangent, 1 / (1 + dt * self.symbol()))
        J = np.eye(self.grid.n_interior) - dt * self.principal_jacobian(Z)
        return np.linalg.solve(np.swapaxes(J, -1, -2), cotangent[..., None])[..., 0]

    def _newton(self, b: np.ndarray, dt: float, guess: Optional[np.ndarray]) -> np.ndarray:
        b = np.atleast_2d(b)
        Z = b.copy() if guess is None else np.array(np.broadcast_to(guess, b.shape), dtype=float)
        eye = np.eye(self.grid.n_interior)
        scale = 1 + np.max(np.abs(b), axis=-1)

        def residual(z):
            with np.errstate(over="ignore", invalid="ignore"):
                return z - dt * self.principal(z) - b

        F = residual(Z)
        res = np.max(np.abs(F), axis=-1)
        for it in range(NEWTON_MAX_ITER):
            active = res > NEWTON_TOL * scale
            if not np.any(active):
                break
            J = eye - dt * self.principal_jacobian(Z[active])
            delta = np.linalg.solve(J, F[active][..., None])[..., 0]
            step = np.ones(delta.shape[0])
            Za = Z[active]
            ra = res[active]
            for _ in range(40):
                trial = Za - step[:, None] * delta
                Ft = residual(trial)
                rt = np.max(np.abs(Ft), axis=-1)
                worse = ~(rt < ra) & (rt > NEWTON_TOL * scale[active])
                if not np.any(worse):
                    break
                step = np.where(worse, step / 2, step)
            Z[active] = trial
            F[active] = Ft
            res[active] = rt
            if logger.isEnabledFor(logging.DEBUG):
                logger.debug(f"{self.kind} Newton iteration {it}: max residual {np.max(res):.3e}")
        if not np.all(np.isfinite(Z)):
            _checked(Z, f"{self.kind} implicit step")
        if np.any(res > 1e-8 * scale):
            logger.warning(f"{self.kind} implicit step stopped at residual {np.max(res / scale):.2e}.")
        return Z

    @abstractmethod
    def constants(self, g1: "SlowNoise", radius: float = 10.0) -> SlowConstants:
        ...


class LinearOperator(SlowOperator):
    """A(u) = ν Δ_h u − s u."""

    kind = "linear"
    gamma1 = 2.0

    def __init__(self, grid: Grid, diffusivity: float = 0.0, shift: float = 0.0):
        super().__init__(grid)
        if diffusivity < 0 or not np.isfinite(shift):
            raise ModelSpecError(
                f"linear operator needs diffusivity >= 0 and finite shift, got {diffusivity}, {shift}.", ("slow",)
            )
        self.diffusivity = float(diffusivity)
        self.shift = float(shift)

    @cached_property
    def v_norm(self):
        return W1pNorm(self.grid, 2) if self.diffusivity > 0 else LpNorm(self.grid, 2)

    def principal(self, u):
        return self.diffusivity * laplacian(u, self.grid.h) - self.shift * u

    def symbol(self):
        return self.diffusivity * self.basis.eigenvalues + self.shift

    def constants(self, g1, radius=10.0):
        lip2 = g1.lipschitz**2
        L = self.grid.length
        if self.diffusivity > 0:
            theta1, K = 2 * self.diffusivity, max(0.0, lip2 - 2 * self.shift)
            growth_C = (self.diffusivity + abs(self.shift) * L**2) ** 2
        else:
            theta1, K = 1.0, max(0.0, 1 + lip2 - 2 * self.shift)
            growth_C = self.shift**2
        return SlowConstants(theta1, K, lambda v: 0.0, "zero", max(growth_C, 1e-12), 0.0)


class PorousMedia(SlowOperator):
    """A(u) = Δ_h Ψ(u) + Φ(u) with Ψ(s) = |s|^{r−1}s and Φ(s) = s, in the H⁻¹ pivot."""

    kind = "porous_media"
    pivot_kind = "h_minus1"
    linear_principal = False

    def __init__(self, grid: Grid, r: float = 3.0, with_Phi: bool = True):
        super().__init__(grid)
        if not r > 1:
            raise ModelSpecError(f"porous media needs r > 1, got {r}.", ("slow", "r"))
        self.r = float(r)
        self.with_Phi = bool(with_Phi)
        self.gamma1 = self.r + 1
        self._laplacian_matrix = -_difference_matrix(grid).T @ _difference_matrix(grid)

    @cached_property
    def v_norm(self):
        return LpNorm(self.grid, self.r + 1)

    def principal(self, u):
        return laplacian(_signed_power(u, self.r), self.grid.h)

    def lower(self, u):
        return u.copy() if self.with_Phi else np.zeros_like(u)

    def lower_vjp(self, u, w):
        return w.copy() if self.with_Phi else np.zeros_like(w)

    def principal_jacobian(self, u):
        dpsi = self.r * np.abs(u) ** (self.r - 1)
        return self._laplacian_matrix * dpsi[..., None, :]

    def constants(self, g1, radius=10.0):
        if g1.lipschitz > 0:
            raise ModelSpecError("porous media requires a state-independent G1 in the H^-1 pivot.", ("noise", "g1"))
        r = self.r
        L = self.grid.length
        gprime = (r + 1) / r
        m = L ** (0.5 - 1 / (r + 1)) / np.sqrt(self.basis.lambda1) if self.with_Phi else 0.0
        growth_C = 2 ** (gprime - 1) * (1 + m ** (2 * gprime))
        return SlowConstants(2 ** (1 - r), 2.0 if self.with_Phi else 0.0, lambda v: 0.0, "zero", growth_C, 0.0)


class FastDiffusion(PorousMedia):
    """A(u) = Δ_h(|u|^{r−1}u) with 0 < r < 1; handled through the alternative coercivity path."""

    kind = "fast_diffusion"
    uses_a4 = True
    jacobian_floor = 1e-6

    def __init__(self, grid: Grid, r: float = 0.5):
        SlowOperator.__init__(self, grid)
        if not 0 < r < 1:
            raise ModelSpecError(f"fast diffusion needs 0 < r < 1, got {r}.", ("slow", "r"))
        self.r = float(r)
        self.with_Phi = False
        self.gamma1 = self.r + 1
        self._laplacian_matrix = -_difference_matrix(grid).T @ _difference_matrix(grid)

    def principal_jacobian(self, u):
        dpsi = self.r * np.maximum(np.abs(u), self.jacobian_floor) ** (self.r - 1)
        return self._laplacian_matrix * dpsi[..., None, :]

    def constants(self, g1, radius=10.0):
        if g1.lipschitz > 0:
            raise ModelSpecError("fast diffusion requires a state-independent G1 in the H^-1 pivot.", ("noise", "g1"))
        c0, c1 = g1.hs_growth(self.pivot)
        return SlowConstants(0.0, 0.0, lambda v: 0.0, "zero", 1.0, 0.0, coercive_theta1=2.0, coercive_K=max(c0, c1))


class PLaplace(SlowOperator):
    """A(u) = −Dᵀ(|Du|^{p−2}Du) − c|u|^{q−2}u with forward differences D."""

    kind = "p_laplace"
    jacobian_floor = 1e-6

    def __init__(self, grid: Grid, p: float = 2.0, q: float = 2.0, c: float = 0.0):
        super().__init__(grid)
        if not p > 1:
            raise ModelSpecError(f"p-Laplace needs p > 1, got {p}.", ("slow", "p"))
        if not 1 <= q <= max(p, 2) or c < 0:
            raise ModelSpecError(f"p-Laplace needs 1 <= q <= p and c >= 0, got q={q}, c={c}.", ("slow", "q"))
        self.p, self.q, self.c = float(p), float(q), float(c)
        self.gamma1 = self.p
        self.uses_a4 = self.p < 2
        self.linear_principal = self.p == 2
        self._D = _difference_matrix(grid)

    @cached_property
    def v_norm(self):
        return W1pNorm(self.grid, self.p)

    def principal(self, u):
        if self.linear_principal:
            return laplacian(u, self.grid.h)
        flux = _signed_power(forward_difference(u, self.grid.h), self.p - 1)
        return backward_divergence(flux, self.grid.h)

    def symbol(self):
        return self.basis.eigenvalues

    def principal_jacobian(self, u):
        Du = forward_difference(u, self.grid.h)
        dflux = (self.p - 1) * np.maximum(np.abs(Du), self.jacobian_floor) ** (self.p - 2)
        return -(self._D.T * dflux[..., None, :]) @ self._D

    def lower(self, u):
        if self.c == 0:
            return np.zeros_like(u)
        return -self.c * _signed_power(u, self.q - 1)

    def lower_vjp(self, u, w):
        if self.c == 0 or self.q == 1:
            return np.zeros_like(w)
        base = np.maximum(np.abs(u), 1e-12) if self.q < 2 else np.abs(u)
        return -self.c * (self.q - 1) * base ** (self.q - 2) * w

    def constants(self, g1, radius=10.0):
        p, q, L = self.p, self.q, self.grid.length
        pprime = p / (p - 1)
        b = self.c * L ** ((1 - 1 / p) * (q - 1)) * L ** (2 - 1 / p)
        growth_C = 2 ** (pprime - 1) * (1 + b**pprime)
        K = g1.lipschitz**2
        if self.uses_a4:
            c0, c1 = g1.hs_growth(self.pivot)
            return SlowConstants(
                0.0, K, lambda v: 0.0, "zero", growth_C, 0.0, coercive_theta1=2.0, coercive_K=max(c0, c1)
            )
        return SlowConstants(2 ** (3 - p), K, lambda v: 0.0, "zero", growth_C, 0.0)


class Burgers(SlowOperator):
    """A(u) = Δ_h u + f(u)·D_c u + h(u) with f(s) = f_lipschitz·s and polynomial h, h(0) = 0."""

    kind = "burgers"
    gamma1 = 2.0

    def __init__(self, grid: Grid, f_lipschitz: float = 1.0, h_coeffs: Sequence[float] = (0.0, 0.0, -1.0)):
        super().__init__(grid)
        coeffs = np.asarray(h_coeffs, dtype=float)
        if not np.all(np.isfinite(coeffs)) or not np.isfinite(f_lipschitz):
            raise ModelSpecError("burgers coefficients must be finite.", ("slow", "h_coeffs"))
        self.f_lipschitz = float(f_lipschitz)
        # ascending coefficients from degree 1; the constant term is pinned to zero
        self.h_coeffs = np.concatenate([[0.0], coeffs])
        self.h_one_sided = self._one_sided_lipschitz(self.h_coeffs)

    @staticmethod
    def _one_sided_lipschitz(coeffs: np.ndarray) -> float:
        dh = P.polyder(P.polytrim(coeffs))
        dh = P.polytrim(dh)
        if dh.size <= 1:
            return float(dh[0]) if dh.size else 0.0
        degree = dh.size - 1
        if degree % 2 == 1 or dh[-1] > 0:
            raise ModelSpecError(
                "h must be one-sided Lipschitz: odd degree with negative leading coefficient.", ("slow", "h_coeffs")
            )
        critical = P.polyroots(P.polyder(dh))
        critical = critical[np.abs(critical.imag) < 1e-9].real
        return float(np.max(P.polyval(critical, dh))) if critical.size else float(dh[0])

    @cached_property
    def v_norm(self):
        return W1pNorm(self.grid, 2)

    def principal(self, u):
        return laplacian(u, self.grid.h)

    def symbol(self):
        return self.basis.eigenvalues

    def lower(self, u):
        return self.f_lipschitz * u * central_difference(u, self.grid.h) + P.polyval(u, self.h_coeffs)

    def lower_vjp(self, u, w):
        h = self.grid.h
        f = self.f_lipschitz
        dh = P.polyval(u, P.polyder(self.h_coeffs))
        # central difference matrix is antisymmetric under Dirichlet padding
        return f * central_difference(u, h) * w - f * central_difference(u * w, h) + dh * w

    def constants(self, g1, radius=10.0):
        h, L, f = self.grid.h, self.grid.length, abs(self.f_lipschitz)
        K = 2 * max(self.h_one_sided, 0.0) + g1.lipschitz**2
        rho_C = 2 * f / np.sqrt(h) + f**2 * L
        v_norm, pivot = self.v_norm, self.pivot

        def rho(v):
            return float(rho_C * (1 + v_norm(v) ** 2) * (1 + pivot.norm(v) ** 2))

        # growth constant on the H-ball of the given radius
        t = np.linspace(0.0, radius, 2001)
        c_adv = f * L / np.sqrt(h)
        poly = np.abs(self.h_coeffs[1]) * np.sqrt(L) * t
        for j, a in enumerate(self.h_coeffs[2:], start=2):
            poly = poly + abs(a) * h ** (-(j - 2) / 2) * t**j
        ratio = (2 * (1 + c_adv * t) ** 2 + 2 * L * poly**2) / (1 + t**2)
        growth_C = 1.01 * float(np.max(ratio))
        return SlowConstants(0.25, K, rho, "C(1+|v|_V^2)(1+|v|_H^2)", growth_C, 2.0)


def apply_A(op: SlowOperator, u) -> np.ndarray:
    return op(as_values(u))


class CouplingF1(ABC):
    """F₁(u, v) = c_slow·u + c_fast·g(v) with pointwise g."""

    kind: str

    def __init__(self, c_slow: float = 0.0, c_fast: float = 1.0):
        if not (np.isfinite(c_slow) and np.isfinite(c_fast)):
            raise ModelSpecError("coupling constants must be finite.", ("coupling",))
        self.c_slow = float(c_slow)
        self.c_fast = float(c_fast)

    @property
    def lipschitz(self) -> float:
        return max(abs(self.c_slow), abs(self.c_fast))

    @property
    def depends_on_fast(self) -> bool:
        return self.c_fast != 0

    @abstractmethod
    def fast_part(self, v: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def fast_part_derivative(self, v: np.ndarray) -> np.ndarray:
        ...

    def __call__(self, u, v):
        return self.c_slow * u + self.c_fast * self.fast_part(v)


class LinearCoupling(CouplingF1):
    kind = "linear"

    def fast_part(self, v):
        return v

    def fast_part_derivative(self, v):
        return np.ones_like(v)


class BoundedLipschitzCoupling(CouplingF1):
    kind = "bounded_lipschitz"

    def __init__(self, c_slow: float = 0.0, c_fast: float = 1.0, saturation: float = 1.0):
        super().__init__(c_slow, c_fast)
        if not saturation > 0:
            raise ModelSpecError(f"saturation must be positive, got {saturation}.", ("coupling", "saturation"))
        self.saturation = float(saturation)

    def fast_part(self, v):
        return self.saturation * np.tanh(v / self.saturation)

    def fast_part_derivative(self, v):
        return 1 / np.cosh(v / self.saturation) ** 2


class FastDrift(ABC):
    """
    Fast drift F₂(x, y) = −Σ μ_k ŷ_k e_k + explicit(x, y); the mode-diagonal linear
    part is implicit in time. The slow argument enters through x_map.
    """

    kind: str

    def __init__(self, grid: Grid, x_map: Literal["identity", "smoothing"] = "identity"):
        if x_map not in ("identity", "smoothing"):
            raise ModelSpecError(f"x_map {x_map} not found for fast drift.", ("fast", "x_map"))
        self.grid = grid
        self.basis = grid.basis
        self.x_map = x_map

    def slow_map(self, x: np.ndarray) -> np.ndarray:
        if self.x_map == "identity":
            return x
        return np.sqrt(self.basis.lambda1) * self.basis.apply_power(x, -0.5)

    @abstractmethod
    def symbol(self) -> np.ndarray:
        ...

    @abstractmethod
    def explicit(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def __call__(self, x: ArrayLike, y: ArrayLike) -> np.ndarray:
        ...

    def implicit_solve(self, b: np.ndarray, tau: float) -> np.ndarray:
        return self.basis.modewise(b, 1 / (1 + tau * self.symbol()))

    @property
    def spectral_gap(self) -> float:
        return float(np.min(self.symbol()))

    @property
    @abstractmethod
    def kappa(self) -> float:
        ...

    @property
    @abstractmethod
    def v_norm(self) -> VNorm:
        ...

    @abstractmethod
    def coercivity_constants(self) -> Tuple[float, float, float]:
        """(C, θ₂, γ₂) of the coercivity hypothesis."""
        ...

    @abstractmethod
    def growth_constants(self) -> Tuple[float, float]:
        """(C, β₂) of the growth hypothesis."""
        ...

    @abstractmethod
    def h3_constant(self, slow_pivot: str = "l2") -> float:
        ...

    def validate(self):
        if not self.spectral_gap > 0 or not self.kappa > 0:
            raise ModelSpecError(
                f"{self.kind} violates the spectral gap condition: λ₁ − L_F2 = {self.spectral_gap:.4g} <= 0.",
                ("fast",),
            )


class LinearOU(FastDrift):
    """F₂(x, y) = dΔ_h y − λ₂ y + b·x."""

    kind = "linear_ou"

    def __init__(self, grid, lambda2=1.0, b=1.0, diffusivity=0.0, x_map="identity"):
        super().__init__(grid, x_map)
        if diffusivity < 0:
            raise ModelSpecError(f"diffusivity must be >= 0, got {diffusivity}.", ("fast", "diffusivity"))
        self.lambda2 = float(lambda2)
        self.b = float(b)
        self.diffusivity = float(diffusivity)

    def symbol(self):
        return self.lambda2 + self.diffusivity * self.basis.eigenvalues

    def explicit(self, x, y):
        return self.b * self.slow_map(x)

    def __call__(self, x, y):
        x, y = self.grid.check(x), self.grid.check(y)
        value = -self.lambda2 * y + self.b * self.slow_map(x)
        if self.diffusivity:
            value = value + self.diffusivity * laplacian(y, self.grid.h)
        return value

    @property
    def kappa(self):
        return 2 * (self.lambda2 + self.diffusivity * self.basis.lambda1)

    @cached_property
    def v_norm(self):
        return W1pNorm(self.grid, 2) if self.diffusivity > 0 else LpNorm(self.grid, 2)

    def coercivity_constants(self):
        C = max(abs(self.b) / 2, 0.5)
        theta2 = self.diffusivity if self.diffusivity > 0 else self.lambda2
        return C, theta2, 2.0

    def growth_constants(self):
        L = self.grid.length
        if self.diffusivity > 0:
            return 3 * max(self.diffusivity**2 + self.lambda2**2 * L**4, self.b**2 * L**2), 0.0
        return 2 * max(self.lambda2**2, self.b**2), 0.0

    def h3_constant(self, slow_pivot="l2"):
        if self.x_map == "smoothing" and slow_pivot == "h_minus1":
            return abs(self.b) * np.sqrt(self.basis.lambda1)
        return abs(self.b)

    def invariant_gaussian(self, x: np.ndarray, g2: "FastNoise") -> Tuple[np.ndarray, np.ndarray]:
        """Mean and pointwise variance of the Gaussian invariant measure of the frozen equation."""
        mu = self.symbol()
        mean = self.basis.modewise(self.b * self.slow_map(x), 1 / mu)
        K = g2.n_modes
        var_modes = g2.sigma**2 / (2 * mu[:K])
        variance = var_modes @ self.basis.vectors[:K] ** 2
        return mean, variance


class ReactionDiffusion(FastDrift):
    """F₂(x, y) = Δ_h y + c₁y − c₂y³ + B(x) with B(x) = clip(m·x, ±b_clip)."""

    kind = "reaction_diffusion"

    def __init__(self, grid, c1=0.0, c2=1.0, b=1.0, b_clip=np.inf, x_map="identity"):
        super().__init__(grid, x_map)
        if c1 < 0 or c2 < 0:
            raise ModelSpecError(f"reaction_diffusion needs c1, c2 >= 0, got {c1}, {c2}.", ("fast",))
        if not b_clip > 0:
            raise ModelSpecError(f"b_clip must be positive, got {b_clip}.", ("fast", "b_clip"))
        self.c1, self.c2 = float(c1), float(c2)
        self.b = float(b)
        self.b_clip = float(b_clip)

    def symbol(self):
        return self.basis.eigenvalues - self.c1

    def B(self, x):
        return np.clip(self.b * self.slow_map(x), -self.b_clip, self.b_clip)

    def explicit(self, x, y):
        with np.errstate(over="ignore", invalid="ignore"):
            return _checked(-self.c2 * y**3 + self.B(x), "reaction_diffusion cubic term")

    def __call__(self, x, y):
        x, y = self.grid.check(x), self.grid.check(y)
        with np.errstate(over="ignore", invalid="ignore"):
            value = laplacian(y, self.grid.h) + self.c1 * y - self.c2 * y**3 + self.B(x)
        return _checked(value, "reaction_diffusion drift")

    @property
    def kappa(self):
        return 2 * (self.basis.lambda1 - self.c1)

    @cached_property
    def v_norm(self):
        return W1pNorm(self.grid, 2)

    def coercivity_constants(self):
        return max(self.c1 + 0.5, self.b**2 / 2, 0.5), 1.0, 2.0

    def growth_constants(self):
        L = self.grid.length
        C = max(4 * max((1 + self.c1 * L**2) ** 2, self.c2**2 * L**2), 2 * self.b**2 * L**2)
        return C, 4.0

    def h3_constant(self, slow_pivot="l2"):
        if self.x_map == "smoothing" and slow_pivot == "h_minus1":
            return abs(self.b) * np.sqrt(self.basis.lambda1)
        return abs(self.b)


def apply_F2(drift: FastDrift, x, y) -> np.ndarray:
    return drift(as_values(x), as_values(y))


class SlowNoise(ABC):
    """
    G₁(u)ξ = Σ_k ξ_k (σ_k + lip·û_k) e_k on the first K sine modes.
    """

    kind: str
    lipschitz: float = 0.0

    def __init__(self, grid: Grid, sigma: ArrayLike):
        self.grid = grid
        self.basis = grid.basis
        self.sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        if not np.all(np.isfinite(self.sigma)):
            raise ModelSpecError("G1 coefficients must be finite.", ("noise", "g1", "sigma"))
        if self.sigma.size > grid.n_interior:
            raise ModelSpecError(
                f"{self.sigma.size} noise modes exceed the {grid.n_interior} grid modes.", ("noise", "n_modes")
            )
        self._E = self.basis.vectors[: self.n_modes]

    @property
    def n_modes(self) -> int:
        return self.sigma.size

    @property
    def is_zero(self) -> bool:
        return self.lipschitz == 0 and not np.any(self.sigma)

    def coefficients(self, u: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.sigma, np.shape(u)[:-1] + (self.n_modes,))

    def apply(self, u: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return (xi * self.coefficients(u)) @ self._E

    def transpose(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Euclidean transpose of ξ ↦ G₁(u)ξ applied to w."""
        return self.coefficients(u) * (w @ self._E.T)

    def state_vjp(self, u: np.ndarray, xi: np.ndarray, w: np.ndarray) -> np.ndarray:
        return np.zeros_like(w)

    def hs_difference_sq(self, u: np.ndarray, v: np.ndarray, pivot: Pivot) -> float:
        diff = self.coefficients(u) - self.coefficients(v)
        return np.sum(diff**2 * pivot.mode_norm_sq()[: self.n_modes], axis=-1)

    def hs_norm_sq(self, u: np.ndarray, pivot: Pivot) -> float:
        return np.sum(self.coefficients(u) ** 2 * pivot.mode_norm_sq()[: self.n_modes], axis=-1)

    @abstractmethod
    def hs_growth(self, pivot: Pivot) -> Tuple[float, float]:
        """(c0, c1) with ‖G₁(u)‖²_HS ≤ c0 + c1‖u‖²_H."""
        ...


class ConstantDiagonalNoise(SlowNoise):
    kind = "constant_diag"

    def hs_growth(self, pivot):
        return float(np.sum(self.sigma**2 * pivot.mode_norm_sq()[: self.n_modes])), 0.0


class StateLipschitzNoise(SlowNoise):
    kind = "state_lipschitz"

    def __init__(self, grid: Grid, sigma: ArrayLike, lip: float = 0.1):
        super().__init__(grid, sigma)
        if not lip >= 0:
            raise ModelSpecError(f"G1 Lipschitz constant must be >= 0, got {lip}.", ("noise", "g1", "lip"))
        self.lipschitz = float(lip)

    def coefficients(self, u):
        return self.sigma + self.lipschitz * self.basis.coefficients(u)[..., : self.n_modes]

    def state_vjp(self, u, xi, w):
        return self.lipschitz * self.grid.h * (xi * (w @ self._E.T)) @ self._E

    def hs_growth(self, pivot):
        return 2 * float(np.sum(self.sigma**2)), 2 * self.lipschitz**2


class FastNoise:
    """G₂ξ = Σ_k σ₂,k ξ_k e_k, mode-diagonal on the fast space."""

    def __init__(self, grid: Grid, sigma: ArrayLike):
        self.grid = grid
        self.sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        if not np.all(np.isfinite(self.sigma)):
            raise ModelSpecError("G2 coefficients must be finite.", ("noise", "g2", "sigma"))
        self._E = grid.basis.vectors[: self.sigma.size]
        self.hs_sum = float(np.sum(self.sigma**2))

    @property
    def n_modes(self) -> int:
        return self.sigma.size

    @property
    def is_zero(self) -> bool:
        return self.hs_sum == 0

    def apply(self, xi: np.ndarray) -> np.ndarray:
        return (xi * self.sigma) @ self._E


@dataclass
class NoiseMaps:
    g1: SlowNoise
    g2: FastNoise

    def __post_init__(self):
        if self.g1.n_modes != self.g2.n_modes:
            raise ModelSpecError(
                f"G1 acts on {self.g1.n_modes} modes but G2 on {self.g2.n_modes}.", ("noise", "n_modes")
            )

    @property
    def n_modes(self) -> int:
        return self.g1.n_modes

    @property
    def hs_sum(self) -> float:
        return self.g2.hs_sum


def _broadcast_sigma(value, n_modes: int, path: Tuple[str, ...]) -> np.ndarray:
    try:
        sigma = np.atleast_1d(np.asarray(value, dtype=float))
    except (TypeError, ValueError) as e:
        raise ModelSpecError(f"expected numbers, got {value!r}.", path) from e
    if sigma.size == 1:
        return np.full(n_modes, float(sigma[0]))
    if sigma.size != n_modes:
        raise ModelSpecError(f"expected {n_modes} coefficients, got {sigma.size}.", path)
    return sigma


def _options(section: dict, allowed: Sequence[str], path: Tuple[str, ...]) -> dict:
    if not isinstance(section, dict):
        raise ModelSpecError(f"section must be a mapping, got {type(section).__name__}.", path)
    for key in section:
        if key not in allowed:
            raise ModelSpecError(f"unknown key '{key}' (allowed: {', '.join(allowed)}).", path + (str(key),))
    return {k: v for k, v in section.items() if k != "kind"}


SLOW_KINDS = {
    "linear": (LinearOperator, ("diffusivity", "shift")),
    "porous_media": (PorousMedia, ("r", "with_Phi")),
    "p_laplace": (PLaplace, ("p", "q", "c")),
    "fast_diffusion": (FastDiffusion, ("r",)),
    "burgers": (Burgers, ("f_lipschitz", "h_coeffs")),
}
COUPLING_KINDS = {
    "linear": (LinearCoupling, ("c_slow", "c_fast")),
    "bounded_lipschitz": (BoundedLipschitzCoupling, ("c_slow", "c_fast", "saturation")),
}
FAST_KINDS = {
    "linear_ou": (LinearOU, ("lambda2", "b", "diffusivity", "x_map")),
    "reaction_diffusion": (ReactionDiffusion, ("c1", "c2", "b", "b_clip", "x_map")),
}


def _build(registry: dict, section: dict, path: Tuple[str, ...], *args):
    if not isinstance(section, dict) or "kind" not in section:
        raise ModelSpecError("missing 'kind'.", path)
    kind = section["kind"]
    if kind not in registry:
        raise ModelSpecError(f"kind '{kind}' not found (available: {', '.join(registry)}).", path + ("kind",))
    cls, allowed = registry[kind]
    kwargs = _options(section, ("kind",) + allowed, path)
    try:
        return cls(*args, **kwargs)
    except ModelSpecError as e:
        raise ModelSpecError(str(e), e.path or path) from e
    except (TypeError, ValueError) as e:
        raise ModelSpecError(f"invalid parameters for {kind}: {e}", path) from e


@dataclass
class ModelSpec:
    """Declarative slow-fast system: grid, A, F₁, F₂, G₁, G₂ and the noise truncation."""

    grid: Grid
    slow: SlowOperator
    coupling: CouplingF1
    fast: FastDrift
    noise: NoiseMaps
    name: str = "model"

    def __post_init__(self):
        for part in (self.slow, self.fast, self.noise.g1, self.noise.g2):
            if part.grid != self.grid:
                raise ModelSpecError(f"{type(part).__name__} is defined on a different grid.")
        if self.n_modes > self.grid.n_interior:
            raise ModelSpecError(f"n_modes {self.n_modes} exceeds n_interior {self.grid.n_interior}.", ("noise",))
        self.fast.validate()
        self.constants  # surfaces incompatible noise/operator pairs at construction

    @property
    def n_modes(self) -> int:
        return self.noise.n_modes

    @property
    def pivot(self) -> Pivot:
        return self.slow.pivot

    @property
    def v_norm(self) -> VNorm:
        return self.slow.v_norm

    @property
    def gamma1(self) -> float:
        return self.slow.gamma1

    @property
    def norm_choice(self) -> str:
        return "c_only" if self.slow.uses_a4 else "full"

    @cached_property
    def constants(self) -> SlowConstants:
        return self.slow.constants(self.noise.g1)

    @classmethod
    def from_dict(cls, d: dict, name: str = "model") -> "ModelSpec":
        for key in ("grid", "slow", "coupling", "fast", "noise"):
            if key not in d:
                raise ModelSpecError(f"missing section '{key}'.", (key,))
        g = _options(d["grid"], ("n_interior", "length"), ("grid",))
        try:
            grid = Grid(int(g.get("n_interior", 8)), float(g.get("length", 1.0)))
        except (TypeError, ValueError) as e:
            raise ModelSpecError(str(e), ("grid",)) from e

        slow = _build(SLOW_KINDS, d["slow"], ("slow",), grid)
        coupling = _build(COUPLING_KINDS, d["coupling"], ("coupling",))
        fast = _build(FAST_KINDS, d["fast"], ("fast",), grid)

        nd = _options(d["noise"], ("n_modes", "g1", "g2"), ("noise",))
        n_modes = nd.get("n_modes", 1)
        if isinstance(n_modes, bool) or not isinstance(n_modes, int):
            raise ModelSpecError(f"expected an integer, got {n_modes!r}.", ("noise", "n_modes"))
        g1d = nd.get("g1", {"kind": "constant_diag", "sigma": 1.0})
        g1d = {"kind": "constant_diag", **g1d} if isinstance(g1d, dict) else g1d
        g1_opts = _options(g1d, ("kind", "sigma", "lip"), ("noise", "g1"))
        sigma1 = _broadcast_sigma(g1_opts.get("sigma", 1.0), n_modes, ("noise", "g1", "sigma"))
        if g1d["kind"] == "constant_diag":
            g1 = ConstantDiagonalNoise(grid, sigma1)
        elif g1d["kind"] == "state_lipschitz":
            lip = g1_opts.get("lip", 0.1)
            if isinstance(lip, bool) or not isinstance(lip, (int, float)):
                raise ModelSpecError(f"expected a number, got {lip!r}.", ("noise", "g1", "lip"))
            g1 = StateLipschitzNoise(grid, sigma1, float(lip))
        else:
            raise ModelSpecError(f"G1 kind '{g1d['kind']}' not found.", ("noise", "g1", "kind"))
        g2_opts = _options(nd.get("g2", {}), ("sigma",), ("noise", "g2"))
        g2 = FastNoise(grid, _broadcast_sigma(g2_opts.get("sigma", 0.0), n_modes, ("noise", "g2", "sigma")))
        return cls(grid, slow, coupling, fast, NoiseMaps(g1, g2), name=name)
