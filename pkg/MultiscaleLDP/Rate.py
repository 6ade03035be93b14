import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from itertools import combinations
from typing import List, Literal, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from .Noise import ControlPath, SeedSpec, project_to_ball
from .Skeleton import SkeletonBlowUpError, SkeletonProblem, _adjoint, _forward, _record
from .Space import Functional, Path, energy_functional, path_metric

logger = logging.getLogger(__name__)

__all__ = [
    "RateTarget",
    "TerminalSet",
    "FullPath",
    "TerminalCost",
    "RateSettings",
    "RateProblem",
    "ObjectiveValue",
    "RateResult",
    "CompactnessReport",
    "evaluate_objective",
    "objective_and_gradient",
    "minimize_rate",
    "level_set_sample",
    "lq_variance",
    "lq_closed_form",
    "lq_optimal_control",
    "lq_laplace_value",
]


class RateTarget(ABC):
    """What the controlled skeleton must reach; penalties return (value, ∂/∂X_N, ∂/∂X_k)."""

    uses_penalty: bool = True

    @abstractmethod
    def penalty(self, prob: SkeletonProblem, states: np.ndarray, w: float):
        ...

    @abstractmethod
    def residual(self, prob: SkeletonProblem, states: np.ndarray) -> float:
        ...


class TerminalSet(RateTarget):
    """Event g(X̄_T) ≥ a, penalized by w·max(0, a − g(X̄_T))²."""

    def __init__(self, g: Functional, level: float):
        self.g = g
        self.level = float(level)

    def penalty(self, prob, states, w):
        gap = self.level - float(self.g(states[-1]))
        if gap <= 0:
            return 0.0, np.zeros_like(states[-1]), None
        return w * gap**2, -2 * w * gap * self.g.gradient(states[-1]), None

    def residual(self, prob, states):
        return max(0.0, self.level - float(self.g(states[-1])))


class FullPath(RateTarget):
    """
    Whole-path target f on the skeleton's step grid, penalized by
    w·Σ_k dt‖X̄_k − f_k‖²_H. The residual is the sup norm of the gap.
    """

    def __init__(self, path: Path, weight: float = 1.0):
        if not weight > 0:
            raise ValueError(f"Full-path penalty weight must be positive, got {weight}.")
        self.path = path
        self.weight = float(weight)

    def _check(self, prob: SkeletonProblem):
        if self.path.values.shape[0] != prob.n_steps + 1 or not np.allclose(self.path.times, prob.times, atol=1e-12):
            raise ValueError("Full-path target must be recorded on the skeleton's step grid.")

    def penalty(self, prob, states, w):
        self._check(prob)
        pivot = prob.model.pivot
        gap = states - self.path.values
        gap[0] = 0.0
        value = w * self.weight * prob.dt * float(np.sum(pivot.inner(gap, gap)))
        path_cot = 2 * w * self.weight * prob.dt * pivot.riesz(gap)
        return value, np.zeros_like(states[-1]), path_cot

    def residual(self, prob, states):
        self._check(prob)
        return float(np.max(prob.model.pivot.norm(states - self.path.values)))


class TerminalCost(RateTarget):
    """Smooth terminal cost h(X̄_T): the variational side of the Laplace principle."""

    uses_penalty = False

    def __init__(self, cost: Functional):
        self.cost = cost

    def penalty(self, prob, states, w):
        return float(self.cost(states[-1])), self.cost.gradient(states[-1]), None

    def residual(self, prob, states):
        return 0.0


@dataclass
class RateSettings:
    max_iter: int = 500
    grad_tol: float = 1e-6
    residual_tol: float = 1e-4
    penalty_w0: float = 1e3
    max_doublings: int = 12
    step_rule: Literal["bb", "armijo", "lbfgs"] = "bb"
    armijo_c: float = 1e-4
    memory: int = 5

    def __post_init__(self):
        if self.step_rule not in ("bb", "armijo", "lbfgs"):
            raise ValueError(f"Unsupported step rule: {self.step_rule}")
        if not self.penalty_w0 > 0:
            raise ValueError(f"penalty_w0 must be positive, got {self.penalty_w0}.")


@dataclass
class RateProblem:
    skeleton: SkeletonProblem = field(repr=False)
    target: RateTarget
    settings: RateSettings = field(default_factory=RateSettings)

    def __post_init__(self):
        if not self.skeleton.drift.differentiable:
            raise ValueError("Rate problems need a differentiable averaged drift (the analytic backend).")

    @property
    def durations(self) -> np.ndarray:
        return self.skeleton.phi.durations

    def control(self, coefficients: np.ndarray) -> ControlPath:
        return self.skeleton.phi.with_coefficients(coefficients)


@dataclass
class ObjectiveValue:
    value: float
    energy: float
    penalty: float
    residual: float
    gradient: Optional[np.ndarray] = field(default=None, repr=False)
    states: Optional[np.ndarray] = field(default=None, repr=False)
    blown_up: bool = False


def _energy(prob: RateProblem, c: np.ndarray) -> float:
    return 0.5 * float(np.sum(prob.durations * np.sum(c**2, axis=1)))


def evaluate_objective(
    prob: RateProblem, coefficients: np.ndarray, w: Optional[float] = None, gradient: bool = True
) -> ObjectiveValue:
    """½∫‖φ‖² plus the target's penalty (or terminal cost), with the discrete-adjoint gradient."""
    w = prob.settings.penalty_w0 if w is None else w
    c = np.reshape(np.asarray(coefficients, dtype=float), prob.skeleton.phi.coefficients.shape)
    try:
        states = _forward(prob.skeleton, c)
    except SkeletonBlowUpError as e:
        logger.debug(f"Forward map blew up at t = {e.time:.4g}.")
        return ObjectiveValue(np.inf, _energy(prob, c), np.inf, np.inf, np.zeros_like(c), None, True)
    energy = _energy(prob, c)
    penalty, terminal_cot, path_cot = prob.target.penalty(prob.skeleton, states, w)
    residual = prob.target.residual(prob.skeleton, states)
    result = ObjectiveValue(energy + penalty, energy, penalty, residual, states=states)
    if gradient:
        adjoint = _adjoint(prob.skeleton, states, terminal_cot, path_cot, c)
        result.gradient = prob.durations[:, None] * c + adjoint
    return result


def objective_and_gradient(prob: RateProblem, phi: ControlPath, w: Optional[float] = None) -> Tuple[float, np.ndarray]:
    """
    Objective and its gradient with respect to the segment coefficients of φ.
    A blown-up forward map gives (+inf, zeros).
    """
    result = evaluate_objective(prob, phi.coefficients, w)
    if result.blown_up:
        logger.warning("Objective evaluated at a control whose skeleton blows up; returning +inf.")
    return result.value, result.gradient


@dataclass
class RateResult:
    I_value: float
    phi_star: ControlPath = field(repr=False)
    residual: float
    feasible: bool
    objective: float
    iterations: int
    penalty_weight: float
    trace: List[dict] = field(default_factory=list, repr=False)


def _grad_norm(prob: RateProblem, g: np.ndarray) -> float:
    # dual norm of the L²(0,T) inner product on piecewise-constant controls
    return float(np.sqrt(np.sum(g**2 / prob.durations[:, None])))


def _descent(prob: RateProblem, c: np.ndarray, w: float, trace: List[dict]) -> Tuple[np.ndarray, ObjectiveValue, int]:
    settings = prob.settings
    Delta = prob.durations[:, None]
    current = evaluate_objective(prob, c, w)
    if current.blown_up:
        return c, current, 0
    history = [current.value]
    step = 1.0
    for it in range(settings.max_iter):
        g = current.gradient
        gnorm = _grad_norm(prob, g)
        trace.append(dict(w=w, iteration=it, objective=current.value, grad_norm=gnorm, residual=current.residual))
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(f"w={w:.3g} it={it} J={current.value:.10g} |g|={gnorm:.3e} residual={current.residual:.3e}")
        if gnorm < settings.grad_tol * (1 + abs(current.value)):
            return c, current, it
        d = -g / Delta
        slope = float(np.sum(g * d))
        reference = max(history[-settings.memory :]) if settings.step_rule == "bb" else current.value
        if settings.step_rule == "armijo":
            step = min(1.0, 2 * step)
        while True:
            trial_c = c + step * d
            trial = evaluate_objective(prob, trial_c, w)
            if not trial.blown_up and trial.value <= reference + settings.armijo_c * step * slope:
                break
            step /= 2
            if step < 1e-20:
                logger.debug("Line search failed to decrease the objective.")
                return c, current, it
        if settings.step_rule == "bb":
            s = trial_c - c
            sy = float(np.sum(s * (trial.gradient - g)))
            step = float(np.sum(Delta * s**2)) / sy if sy > 0 else 1.0
            step = min(max(step, 1e-10), 1e10)
        c, current = trial_c, trial
        history.append(current.value)
    return c, current, settings.max_iter


def _lbfgs(prob: RateProblem, c: np.ndarray, w: float, trace: List[dict]) -> Tuple[np.ndarray, ObjectiveValue, int]:
    shape = c.shape
    root = np.sqrt(prob.durations)[:, None]

    def fun(z):
        value = evaluate_objective(prob, z.reshape(shape) / root, w)
        if value.blown_up:
            return np.inf, np.zeros(z.size)
        gnorm = _grad_norm(prob, value.gradient)
        trace.append(dict(w=w, iteration=len(trace), objective=value.value, grad_norm=gnorm, residual=value.residual))
        return value.value, (value.gradient / root).ravel()

    start = evaluate_objective(prob, c, w, gradient=False)
    gtol = prob.settings.grad_tol * (1 + abs(start.value)) if np.isfinite(start.value) else prob.settings.grad_tol
    opt = minimize(
        fun,
        (c * root).ravel(),
        jac=True,
        method="L-BFGS-B",
        options=dict(maxiter=prob.settings.max_iter, gtol=gtol, ftol=1e-15),
    )
    c = opt.x.reshape(shape) / root
    return c, evaluate_objective(prob, c, w), int(opt.nit)


def minimize_rate(prob: RateProblem, phi0: Optional[ControlPath] = None) -> RateResult:
    """
    Approximates I = inf{½∫‖φ‖² : the skeleton of φ reaches the target} by penalty
    continuation: the weight starts at penalty_w0 and doubles until the residual
    drops below residual_tol. An unreachable target is reported as infeasible
    with I = +inf.
    """
    settings = prob.settings
    c = np.zeros_like(prob.skeleton.phi.coefficients) if phi0 is None else np.array(phi0.coefficients, dtype=float)
    if not np.all(np.isfinite(c)):
        raise ValueError("Initial control must be finite.")
    solver = _lbfgs if settings.step_rule == "lbfgs" else _descent
    trace: List[dict] = []
    w = settings.penalty_w0
    iterations = 0
    n_rounds = 1 if not prob.target.uses_penalty else settings.max_doublings + 1
    for round_ in range(n_rounds):
        c, result, n_it = solver(prob, c, w, trace)
        iterations += n_it
        if result.blown_up:
            break
        if result.residual <= settings.residual_tol or not prob.target.uses_penalty:
            break
        if round_ < n_rounds - 1:
            w *= 2
            logger.debug(f"Residual {result.residual:.3e} above tolerance; penalty weight -> {w:.3g}.")

    feasible = not result.blown_up and result.residual <= settings.residual_tol
    energy = _energy(prob, c)
    I_value = energy if feasible else np.inf
    if feasible:
        logger.info(f"Rate {I_value:.6g} after {iterations} iterations (residual {result.residual:.2e}, w = {w:.3g}).")
    else:
        logger.warning(f"Target not reached: residual {result.residual:.3e} after {iterations} iterations; I = +inf.")
    return RateResult(
        I_value=I_value,
        phi_star=prob.control(c),
        residual=float(result.residual),
        feasible=feasible,
        objective=float(result.value),
        iterations=iterations,
        penalty_weight=w,
        trace=trace,
    )


@dataclass
class CompactnessReport:
    M: float
    n_samples: int
    energies: np.ndarray = field(repr=False)
    sup_energy: float
    fitted_C: float
    diameter: float
    blowups: int = 0
    findings: List[str] = field(default_factory=list)


def level_set_sample(
    M: float,
    n_samples: int,
    prob: SkeletonProblem,
    seed: int = 0,
    C: Optional[float] = None,
) -> CompactnessReport:
    """
    Samples the level set {X̄^φ : φ ∈ S_M}: Gaussian segment coefficients scaled by √M
    and projected onto S_M. Reports the energy sup_t‖X̄‖² + θ₁∫‖X̄‖_V^γ₁ of every
    sample, C fitted from energy ≤ C(1+‖x0‖²), and the largest pairwise distance.
    When C is given, samples above the bound are findings.
    """
    if M < 0:
        raise ValueError(f"M must be nonnegative, got {M}.")
    model = prob.model
    constants = model.constants
    theta1 = constants.coercive_theta1 if model.slow.uses_a4 else constants.theta1
    scale = 1 + float(model.pivot.inner(prob.x0, prob.x0))
    seeds = SeedSpec(seed)

    controls = []
    if M == 0:
        controls.append(prob.phi.with_coefficients(np.zeros_like(prob.phi.coefficients)))
    else:
        for i in range(n_samples):
            z = seeds.stream(i, "control_sample").standard_normal(prob.phi.coefficients.shape)
            phi = prob.phi.with_coefficients(np.sqrt(M / (prob.phi.T * prob.phi.n_modes)) * z)
            controls.append(project_to_ball(phi, M))

    paths: List[Path] = []
    findings: List[str] = []
    blowups = 0
    for i, phi in enumerate(controls):
        try:
            paths.append(_record(prob, _forward(prob.with_control(phi))))
        except SkeletonBlowUpError as e:
            blowups += 1
            findings.append(f"sample {i}: skeleton blew up at t = {e.time:.4g} for a control in S_M")
    energies = np.array(
        [energy_functional(p, theta1, model.gamma1, pivot=model.pivot, v_norm=model.v_norm) for p in paths]
    )
    sup_energy = float(np.max(energies)) if energies.size else np.inf
    if C is not None:
        over = int(np.sum(energies > C * scale))
        if over:
            findings.append(f"{over} samples exceed the energy bound C(1+|x0|^2) with C = {C:.4g}")
    diameter = 0.0
    for f, g in combinations(paths, 2):
        diameter = max(
            diameter, path_metric(f, g, model.gamma1, model.norm_choice, pivot=model.pivot, v_norm=model.v_norm)
        )
    for finding in findings:
        logger.warning(f"Level set M = {M}: {finding}.")
    return CompactnessReport(M, len(controls), energies, sup_energy, sup_energy / scale, diameter, blowups, findings)


def lq_variance(lam: float, sigma: float, T: float) -> float:
    """S = σ²∫₀ᵀe^{−2λ(T−s)}ds for dX = −λX dt + σ(φ dt + √ε dW)."""
    if lam == 0:
        return sigma**2 * T
    return sigma**2 * (1 - np.exp(-2 * lam * T)) / (2 * lam)


def lq_closed_form(lam: float, sigma: float, T: float, a: float, x0: float = 0.0) -> float:
    """Rate of reaching X_T = a: (a − x0 e^{−λT})²/(2S)."""
    shift = a - x0 * np.exp(-lam * T)
    return shift**2 / (2 * lq_variance(lam, sigma, T))


def lq_optimal_control(lam: float, sigma: float, T: float, a: float, times: np.ndarray, x0: float = 0.0) -> np.ndarray:
    """Segment averages of φ*(s) = (a − x0 e^{−λT})σ e^{−λ(T−s)}/S over the given time grid."""
    times = np.asarray(times, dtype=float)
    c = (a - x0 * np.exp(-lam * T)) * sigma / lq_variance(lam, sigma, T)
    if lam == 0:
        return np.full(times.size - 1, c)
    integrals = (np.exp(-lam * (T - times[1:])) - np.exp(-lam * (T - times[:-1]))) / lam
    return c * integrals / np.diff(times)


def lq_laplace_value(
    lam: float, sigma: float, T: float, a: float, beta: float, x0: float = 0.0, epsilon: Optional[float] = None
) -> float:
    """
    For h(x) = β(x − a)²: inf_φ{h(X̄_T^φ) + ½∫φ²} = βm²/(1+2βS) with m = a − x0 e^{−λT}.
    With epsilon, returns the exact −ε log E exp(−h(X_T)/ε) = βm²/(1+2βS) + (ε/2)log(1+2βS).
    """
    S = lq_variance(lam, sigma, T)
    m = a - x0 * np.exp(-lam * T)
    value = beta * m**2 / (1 + 2 * beta * S)
    if epsilon is not None:
        value += 0.5 * epsilon * np.log(1 + 2 * beta * S)
    return float(value)
