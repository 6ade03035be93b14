import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .Averaging import AveragedDrift
from .Models import ModelSpec, NonFiniteOperatorError
from .Noise import ControlPath
from .Simulate import BLOWUP_NORM
from .Space import Path, as_values

logger = logging.getLogger(__name__)

__all__ = ["SkeletonBlowUpError", "SkeletonProblem", "solve_skeleton", "solve_forward_map"]


class SkeletonBlowUpError(RuntimeError):
    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


@dataclass
class SkeletonProblem:
    """
    dX̄/dt = A(X̄) + F̄₁(X̄) + G₁(X̄)φ, X̄(0) = x0, on [0, T] with step dt.
    Every control segment must be a whole number of steps.
    """

    model: ModelSpec = field(repr=False)
    phi: ControlPath = field(repr=False)
    x0: np.ndarray = field(repr=False)
    dt: float = 1e-3
    drift: Optional[AveragedDrift] = field(default=None, repr=False)
    record_every: int = 1

    def __post_init__(self):
        self.x0 = np.array(self.model.grid.check(as_values(self.x0)), dtype=float)
        if not np.all(np.isfinite(self.x0)):
            raise ValueError("Skeleton initial state must be finite.")
        if self.phi.n_modes != self.model.n_modes:
            raise ValueError(f"Control has {self.phi.n_modes} modes but the noise truncation has {self.model.n_modes}.")
        if not self.dt > 0:
            raise ValueError(f"Skeleton time step must be positive, got {self.dt}.")
        steps = self.phi.durations / self.dt
        if np.any(np.abs(steps - np.rint(steps)) > 1e-6) or np.any(np.rint(steps) < 1):
            raise ValueError(f"dt = {self.dt} does not divide every control segment.")
        if self.record_every < 1:
            raise ValueError(f"record_every must be positive, got {self.record_every}.")
        if self.drift is None:
            self.drift = AveragedDrift(self.model)
        self.drift.check_ready()
        self.steps_per_segment = np.rint(steps).astype(int)
        self.segment = np.repeat(np.arange(self.phi.n_segments), self.steps_per_segment)

    @property
    def T(self) -> float:
        return self.phi.T

    @property
    def n_steps(self) -> int:
        return int(self.segment.size)

    @property
    def times(self) -> np.ndarray:
        steps = np.repeat(self.phi.durations / self.steps_per_segment, self.steps_per_segment)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def with_control(self, phi: ControlPath) -> "SkeletonProblem":
        return replace(self, phi=phi)


def _forward(prob: SkeletonProblem, coefficients: Optional[np.ndarray] = None) -> np.ndarray:
    """All states X_0..X_N of the semi-implicit scheme."""
    model, dt = prob.model, prob.dt
    slow, g1, drift = model.slow, model.noise.g1, prob.drift
    coefficients = prob.phi.coefficients if coefficients is None else coefficients
    states = np.empty((prob.n_steps + 1, model.grid.n_interior))
    states[0] = X = prob.x0
    for k in range(prob.n_steps):
        phi_k = coefficients[prob.segment[k]]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                b = X + dt * (slow.lower(X) + drift(X)[0] + g1.apply(X, phi_k))
                X = slow.implicit_solve(b, dt, guess=X)
                X = X[0] if X.ndim > 1 else X
        except NonFiniteOperatorError as e:
            raise SkeletonBlowUpError(f"Skeleton blew up at t = {(k + 1) * dt:.6g}: {e}", (k + 1) * dt) from e
        if not np.all(np.isfinite(X)) or model.pivot.norm(X) > BLOWUP_NORM:
            raise SkeletonBlowUpError(f"Skeleton blew up at t = {(k + 1) * dt:.6g}.", (k + 1) * dt)
        states[k + 1] = X
    return states


def _adjoint(
    prob: SkeletonProblem,
    states: np.ndarray,
    terminal_cotangent: np.ndarray,
    path_cotangent: Optional[np.ndarray] = None,
    coefficients: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Discrete adjoint of the forward scheme. Returns ∂L/∂c for the segment coefficients,
    where ∂L/∂X_N = terminal_cotangent and ∂L/∂X_k (k ≥ 1) = path_cotangent[k].
    """
    model, dt = prob.model, prob.dt
    slow, g1, drift = model.slow, model.noise.g1, prob.drift
    coefficients = prob.phi.coefficients if coefficients is None else coefficients
    gradient = np.zeros_like(coefficients)
    lam = np.array(terminal_cotangent, dtype=float)
    if path_cotangent is not None:
        lam = lam + path_cotangent[-1]
    for k in range(prob.n_steps - 1, -1, -1):
        X, X_next = states[k], states[k + 1]
        phi_k = coefficients[prob.segment[k]]
        mu = slow.implicit_solve_transpose(X_next, dt, lam)
        mu = mu[0] if mu.ndim > 1 else mu
        gradient[prob.segment[k]] += dt * g1.transpose(X, mu)
        lam = mu + dt * (slow.lower_vjp(X, mu) + drift.vjp(X, mu) + g1.state_vjp(X, phi_k, mu))
        if path_cotangent is not None and k > 0:
            lam = lam + path_cotangent[k]
    return gradient


def _record(prob: SkeletonProblem, states: np.ndarray) -> Path:
    index = list(range(0, prob.n_steps + 1, prob.record_every))
    if index[-1] != prob.n_steps:
        index.append(prob.n_steps)
    return Path(prob.model.grid, prob.times[index], states[index])


def solve_skeleton(prob: SkeletonProblem) -> Path:
    """Deterministic skeleton path on the recording grid; raises SkeletonBlowUpError on blow-up."""
    return _record(prob, _forward(prob))


def solve_forward_map(phi: ControlPath, prob: SkeletonProblem) -> Path:
    """The control-to-path map φ ↦ X̄^φ for a problem template."""
    return solve_skeleton(prob.with_control(phi))
