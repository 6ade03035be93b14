import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FilePath
from typing import Literal, Optional, Tuple, Union

import numpy as np
import polars as pl
from numpy.typing import ArrayLike
from tqdm import tqdm

from .Models import ModelSpec
from .Noise import ControlPath, NoiseTruncation, SeedSpec, wiener_increments
from .Space import Grid, L2Pivot, Path, Pivot, as_values

logger = logging.getLogger(__name__)

__all__ = [
    "ScaleParams",
    "StoppingSpec",
    "IntegrationError",
    "Trajectory",
    "Ensemble",
    "step_slow_fast",
    "run_trajectory",
    "run_ensemble",
    "run_auxiliary",
    "time_increment_statistic",
    "auxiliary_difference",
    "BLOWUP_NORM",
]

BLOWUP_NORM = 1e6
ASYMPTOTIC_RATIO = 0.1


class IntegrationError(RuntimeError):
    def __init__(self, message: str, step: int, time: float):
        super().__init__(message)
        self.step = step
        self.time = time


@dataclass
class ScaleParams:
    """
    (ε, α, δ) with the horizon T and micro step dt.

    dt defaults to α/dt_factor, shortened so that T/dt is an integer. δ defaults to
    √α and is snapped to a multiple of 4 micro steps; paths are recorded every δ/4.
    ε = 0 is the deterministic limit.
    """

    epsilon: float
    alpha: float
    T: float = 1.0
    dt: Optional[float] = None
    delta: Optional[float] = None
    dt_factor: float = 20.0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}.")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}.")
        if self.epsilon > 0 and self.alpha > self.epsilon:
            raise ValueError(f"alpha = {self.alpha} exceeds epsilon = {self.epsilon}; need alpha/epsilon <= 1.")
        if not self.T > 0:
            raise ValueError(f"Horizon T must be positive, got {self.T}.")
        if self.dt_factor < 20:
            raise ValueError(f"dt_factor must be at least 20, got {self.dt_factor}.")

        max_dt = self.alpha / 20
        if self.dt is None:
            n_steps = math.ceil(self.T / (self.alpha / self.dt_factor) - 1e-9)
        else:
            if self.dt > max_dt * (1 + 1e-12):
                raise ValueError(f"dt = {self.dt} does not resolve the fast scale; need dt <= alpha/20 = {max_dt}.")
            n_steps = round(self.T / self.dt)
            if n_steps < 1 or abs(n_steps * self.dt - self.T) > 1e-9 * self.T:
                raise ValueError(f"T = {self.T} is not a multiple of dt = {self.dt}.")
        self.n_steps = int(n_steps)
        self.dt = self.T / self.n_steps

        delta = np.sqrt(self.alpha) if self.delta is None else self.delta
        if not delta > 0:
            raise ValueError(f"Block length delta must be positive, got {delta}.")
        self.delta_steps = max(4, 4 * round(delta / (4 * self.dt)))
        self.delta = self.delta_steps * self.dt

    @classmethod
    def from_epsilon(cls, epsilon: float, T: float = 1.0, exponent: float = 1.5, **kwargs) -> "ScaleParams":
        """α = ε^exponent, the default coupling of the two scales."""
        return cls(epsilon, epsilon**exponent, T=T, **kwargs)

    @property
    def ratio(self) -> float:
        return self.alpha / self.epsilon if self.epsilon > 0 else 0.0

    @property
    def asymptotic(self) -> bool:
        return self.epsilon > 0 and self.ratio <= ASYMPTOTIC_RATIO

    @property
    def record_stride(self) -> int:
        return self.delta_steps // 4


@dataclass
class StoppingSpec:
    """
    Exit rule. "tau" stops when ‖X_t‖_H > N. "tau_tilde" also stops on the running
    V-energy ∫‖X‖_V^γ₁ and on the reference (skeleton) path's norm and energy.
    """

    N: float = np.inf
    mode: Literal["tau", "tau_tilde"] = "tau"
    reference: Optional[Path] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.N > 0:
            raise ValueError(f"Stopping radius N must be positive, got {self.N}.")
        if self.mode not in ("tau", "tau_tilde"):
            raise ValueError(f"Unsupported stopping mode: {self.mode}")

    def reference_exit_step(self, model: ModelSpec, scales: ScaleParams) -> int:
        """First micro step at which the reference path leaves the N-ball, n_steps if never."""
        if self.mode != "tau_tilde" or self.reference is None:
            return scales.n_steps
        ref = self.reference
        norms = model.pivot.norm(ref.values)
        energy = np.concatenate([[0.0], np.cumsum(np.diff(ref.times) * model.v_norm(ref.values[:-1]) ** model.gamma1)])
        bad = np.flatnonzero((norms > self.N) | (energy > self.N))
        if bad.size == 0:
            return scales.n_steps
        return min(scales.n_steps, int(np.ceil(ref.times[bad[0]] / scales.dt - 1e-9)))


@dataclass
class Trajectory:
    """Recorded slow/fast path of one realization, with the Girsanov log-weight."""

    grid: Grid = field(repr=False)
    times: np.ndarray = field(repr=False)
    slow: np.ndarray = field(repr=False)
    fast: np.ndarray = field(repr=False)
    log_girsanov: np.ndarray = field(repr=False)
    exit_time: float
    failed: bool = False
    pivot: Pivot = field(default=None, repr=False)

    def __post_init__(self):
        self.pivot = self.pivot or L2Pivot(self.grid)

    @property
    def slow_path(self) -> Path:
        return Path(self.grid, self.times, self.slow)

    @property
    def fast_path(self) -> Path:
        return Path(self.grid, self.times, self.fast)

    def to_frame(self, model: ModelSpec, fields: bool = False) -> pl.DataFrame:
        data = {
            "t": self.times,
            "x_h": model.pivot.norm(self.slow),
            "x_v": model.v_norm(self.slow),
            "y_h": L2Pivot(self.grid).norm(self.fast),
            "log_girsanov": self.log_girsanov,
        }
        if fields:
            for i in range(self.grid.n_interior):
                data[f"x_{i + 1}"] = self.slow[:, i]
            for i in range(self.grid.n_interior):
                data[f"y_{i + 1}"] = self.fast[:, i]
        return pl.DataFrame(data)

    def to_csv(self, path: Union[str, FilePath], model: ModelSpec, fields: bool = False):
        self.to_frame(model, fields).write_csv(path)


@dataclass
class Ensemble:
    """Trajectories stacked along axis 0, ordered by trajectory index."""

    grid: Grid = field(repr=False)
    times: np.ndarray = field(repr=False)
    slow: np.ndarray = field(repr=False)
    fast: np.ndarray = field(repr=False)
    log_girsanov: np.ndarray = field(repr=False)
    exit_time: np.ndarray = field(repr=False)
    failed: np.ndarray = field(repr=False)
    pivot: Pivot = field(default=None, repr=False)

    def __post_init__(self):
        self.pivot = self.pivot or L2Pivot(self.grid)

    @property
    def n_paths(self) -> int:
        return self.slow.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.slow[:, -1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_girsanov[:, -1])

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            self.grid,
            self.times,
            self.slow[i],
            self.fast[i],
            self.log_girsanov[i],
            float(self.exit_time[i]),
            bool(self.failed[i]),
            self.pivot,
        )

    def summary_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "path": np.arange(self.n_paths),
                "exit_time": self.exit_time,
                "failed": self.failed,
                "x_h_T": self.pivot.norm(self.terminal),
                "log_girsanov_T": self.log_girsanov[:, -1],
            }
        )


def _check_control(model: ModelSpec, scales: ScaleParams, phi: Optional[ControlPath]):
    if phi is None:
        return
    if phi.n_modes != model.n_modes:
        raise ValueError(f"Control has {phi.n_modes} modes but the noise truncation has {model.n_modes}.")
    if abs(phi.T - scales.T) > 1e-9 * scales.T:
        raise ValueError(f"Control horizon {phi.T} differs from T = {scales.T}.")
    if scales.epsilon == 0 and not model.noise.g2.is_zero:
        raise ValueError("A control with epsilon = 0 needs G2 = 0: the fast control term scales as 1/sqrt(alpha*eps).")


def _advance(
    model: ModelSpec, scales: ScaleParams, X: np.ndarray, Y: np.ndarray, dW: np.ndarray, phi: Optional[np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    slow, fast, g1, g2 = model.slow, model.fast, model.noise.g1, model.noise.g2
    dt, alpha, eps = scales.dt, scales.alpha, scales.epsilon
    with np.errstate(over="ignore", invalid="ignore"):
        drift = slow.lower(X) + model.coupling(X, Y)
        if phi is not None:
            drift = drift + g1.apply(X, phi)
        b = X + dt * drift
        if eps > 0:
            b = b + np.sqrt(eps) * g1.apply(X, dW)
        X_next = slow.implicit_solve(b, dt, guess=X)

        by = Y + (dt / alpha) * fast.explicit(X, Y)
        if not g2.is_zero:
            by = by + g2.apply(dW) / np.sqrt(alpha)
            if phi is not None:
                by = by + (dt / np.sqrt(alpha * eps)) * g2.apply(phi)
        Y_next = fast.implicit_solve(by, dt / alpha)
    return X_next, Y_next


def step_slow_fast(
    model: ModelSpec,
    scales: ScaleParams,
    state: Tuple[ArrayLike, ArrayLike],
    dW: ArrayLike,
    phi: Optional[ArrayLike] = None,
    step: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One semi-implicit Euler–Maruyama step of the (controlled) slow-fast system.
    The principal part of A and the mode-diagonal part of F₂ are implicit, the rest explicit.
    `phi` holds the control's mode coefficients on this step.
    """
    X, Y = (model.grid.check(as_values(s)) for s in state)
    dW = np.asarray(dW, dtype=float)
    phi = None if phi is None else np.asarray(phi, dtype=float)
    if phi is not None and scales.epsilon == 0 and not model.noise.g2.is_zero:
        raise ValueError("A control with epsilon = 0 needs G2 = 0.")
    single = X.ndim == 1
    X_next, Y_next = _advance(model, scales, np.atleast_2d(X), np.atleast_2d(Y), dW, phi)
    if not (np.all(np.isfinite(X_next)) and np.all(np.isfinite(Y_next))):
        raise IntegrationError(f"Non-finite state at step {step}.", step, (step + 1) * scales.dt)
    return (X_next[0], Y_next[0]) if single else (X_next, Y_next)


def _run_batch(
    model: ModelSpec,
    scales: ScaleParams,
    x0: np.ndarray,
    y0: np.ndarray,
    increments: np.ndarray,
    phi_steps: Optional[np.ndarray],
    stopping: StoppingSpec,
    record_stride: int,
    raise_on_nonfinite: bool = False,
) -> dict:
    """Integrates a batch of rows; increments has shape (rows, n_steps, K)."""
    rows, n = increments.shape[0], model.grid.n_interior
    dt, eps, n_steps = scales.dt, scales.epsilon, scales.n_steps
    pivot, v_norm, gamma1 = model.pivot, model.v_norm, model.gamma1

    record_steps = list(range(0, n_steps + 1, record_stride))
    if record_steps[-1] != n_steps:
        record_steps.append(n_steps)
    n_rec = len(record_steps)
    record_at = {k: j for j, k in enumerate(record_steps)}

    X = np.array(np.broadcast_to(x0, (rows, n)), dtype=float)
    Y = np.array(np.broadcast_to(y0, (rows, n)), dtype=float)
    log_w = np.zeros(rows)
    slow_rec = np.empty((rows, n_rec, n))
    fast_rec = np.empty((rows, n_rec, n))
    logw_rec = np.empty((rows, n_rec))
    slow_rec[:, 0], fast_rec[:, 0], logw_rec[:, 0] = X, Y, 0.0

    stopped = np.zeros(rows, dtype=bool)
    failed = np.zeros(rows, dtype=bool)
    exit_time = np.full(rows, scales.T)
    v_energy = np.zeros(rows)
    ref_exit = stopping.reference_exit_step(model, scales)
    track_energy = stopping.mode == "tau_tilde" and np.isfinite(stopping.N)

    for k in range(n_steps):
        active = np.flatnonzero(~(stopped | failed))
        if active.size == 0:
            pass
        elif k >= ref_exit:
            stopped[active] = True
            exit_time[active] = k * dt
        else:
            Xa, Ya, dW = X[active], Y[active], increments[active, k]
            phi = None if phi_steps is None else phi_steps[k]
            X_next, Y_next = _advance(model, scales, Xa, Ya, dW, phi)
            finite = np.all(np.isfinite(X_next), axis=1) & np.all(np.isfinite(Y_next), axis=1)
            if raise_on_nonfinite and not np.all(finite):
                raise IntegrationError(f"Non-finite state at step {k} (t = {(k + 1) * dt:.6g}).", k, (k + 1) * dt)
            with np.errstate(over="ignore", invalid="ignore"):
                norms = np.where(finite, pivot.norm(np.where(finite[:, None], X_next, 0.0)), np.inf)
                fast_norms = np.where(finite, L2Pivot(model.grid).norm(np.where(finite[:, None], Y_next, 0.0)), np.inf)
            blown = (norms > BLOWUP_NORM) | (fast_norms > BLOWUP_NORM)
            if np.any(blown):
                failed[active[blown]] = True
                exit_time[active[blown]] = (k + 1) * dt
                logger.debug(f"{int(np.sum(blown))} trajectories left the 1e6 ball at step {k}.")
            ok = active[~blown]
            if track_energy:
                v_energy[active] += dt * v_norm(Xa) ** gamma1
            if phi is not None and eps > 0:
                log_w[ok] += -(dW[~blown] @ phi) / np.sqrt(eps) - dt * float(phi @ phi) / (2 * eps)
            X[ok], Y[ok] = X_next[~blown], Y_next[~blown]
            exits = norms[~blown] > stopping.N
            if track_energy:
                exits |= v_energy[ok] > stopping.N
            stopped[ok[exits]] = True
            exit_time[ok[exits]] = (k + 1) * dt
        j = record_at.get(k + 1)
        if j is not None:
            slow_rec[:, j], fast_rec[:, j], logw_rec[:, j] = X, Y, log_w
    times = np.array(record_steps) * dt
    times[-1] = scales.T
    return dict(times=times, slow=slow_rec, fast=fast_rec, log_girsanov=logw_rec, exit_time=exit_time, failed=failed)


def run_trajectory(
    model: ModelSpec,
    scales: ScaleParams,
    x0: ArrayLike,
    y0: ArrayLike,
    phi: Optional[ControlPath] = None,
    stopping: Optional[StoppingSpec] = None,
    stream: Optional[np.random.Generator] = None,
    record_stride: Optional[int] = None,
) -> Trajectory:
    """
    Simulates one realization of the slow-fast system, controlled when `phi` is given.
    Raises IntegrationError on a non-finite state; leaving the 1e6 ball marks it failed.
    """
    _check_control(model, scales, phi)
    stopping = stopping or StoppingSpec()
    stream = stream if stream is not None else SeedSpec(0).stream(0)
    trunc = NoiseTruncation(model.grid, model.n_modes)
    increments = wiener_increments(trunc, scales.dt, scales.n_steps, stream)[None]
    phi_steps = None if phi is None else phi.on_steps(scales.dt, scales.n_steps)
    out = _run_batch(
        model,
        scales,
        model.grid.check(as_values(x0)),
        model.grid.check(as_values(y0)),
        increments,
        phi_steps,
        stopping,
        record_stride or scales.record_stride,
        raise_on_nonfinite=True,
    )
    return Trajectory(
        model.grid,
        out["times"],
        out["slow"][0],
        out["fast"][0],
        out["log_girsanov"][0],
        float(out["exit_time"][0]),
        bool(out["failed"][0]),
        model.pivot,
    )


def run_ensemble(
    model: ModelSpec,
    scales: ScaleParams,
    x0: ArrayLike,
    y0: ArrayLike,
    phi: Optional[ControlPath] = None,
    n_paths: int = 100,
    seed: int = 0,
    stopping: Optional[StoppingSpec] = None,
    threads: int = 1,
    chunk_size: int = 256,
    record_stride: Optional[int] = None,
    index_offset: int = 0,
    progress: bool = True,
) -> Ensemble:
    """
    Runs n_paths trajectories in fixed chunks. Trajectory i draws its increments from
    SeedSpec(seed).stream(index_offset + i), so the result does not depend on `threads`.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be positive, got {n_paths}.")
    if threads < 1:
        raise ValueError(f"threads must be positive, got {threads}.")
    _check_control(model, scales, phi)
    stopping = stopping or StoppingSpec()
    seeds = SeedSpec(seed)
    trunc = NoiseTruncation(model.grid, model.n_modes)
    phi_steps = None if phi is None else phi.on_steps(scales.dt, scales.n_steps)
    x0 = model.grid.check(as_values(x0))
    y0 = model.grid.check(as_values(y0))
    stride = record_stride or scales.record_stride
    starts = list(range(0, n_paths, chunk_size))

    def run_chunk(start: int) -> dict:
        stop = min(start + chunk_size, n_paths)
        increments = np.stack(
            [
                wiener_increments(trunc, scales.dt, scales.n_steps, seeds.stream(index_offset + i))
                for i in range(start, stop)
            ]
        )
        return _run_batch(model, scales, x0, y0, increments, phi_steps, stopping, stride)

    logger.info(
        f"Simulating {n_paths} paths of {model.name} (eps={scales.epsilon:.4g}, alpha={scales.alpha:.4g}, "
        f"{scales.n_steps} steps) on {threads} thread(s)."
    )
    with ThreadPoolExecutor(max_workers=threads) as executor:
        chunks = list(
            tqdm(
                executor.map(run_chunk, starts),
                total=len(starts),
                desc=f"{model.name} eps={scales.epsilon:.3g}",
                disable=None if progress else True,
                leave=False,
            )
        )
    n_failed = int(sum(np.sum(c["failed"]) for c in chunks))
    if n_failed:
        logger.warning(f"{n_failed}/{n_paths} trajectories left the 1e6 ball and were frozen.")
    return Ensemble(
        model.grid,
        chunks[0]["times"],
        np.concatenate([c["slow"] for c in chunks]),
        np.concatenate([c["fast"] for c in chunks]),
        np.concatenate([c["log_girsanov"] for c in chunks]),
        np.concatenate([c["exit_time"] for c in chunks]),
        np.concatenate([c["failed"] for c in chunks]),
        model.pivot,
    )


def _record_spacing(times: np.ndarray) -> float:
    if times.size < 2:
        raise ValueError("Recorded path needs at least two time points.")
    return float(times[1] - times[0])


def run_auxiliary(
    model: ModelSpec,
    scales: ScaleParams,
    trajectory: Trajectory,
    y0: ArrayLike,
    stream: np.random.Generator,
    phi: Optional[ControlPath] = None,
) -> Trajectory:
    """
    Khasminskii auxiliary fast process: Ŷ is driven by F₂(X_{t(δ)}, Ŷ) with the slow
    argument frozen at the block start t(δ) = ⌊t/δ⌋δ. Passing the paired trajectory's
    stream reproduces its Wiener increments. The returned slow field holds the
    frozen block values.
    """
    _check_control(model, scales, phi)
    spacing = _record_spacing(trajectory.times)
    per_block = scales.delta / spacing
    if abs(per_block - round(per_block)) > 1e-6:
        raise ValueError(f"Recording stride {spacing:.6g} does not divide delta = {scales.delta:.6g}.")
    fast, g2 = model.fast, model.noise.g2
    dt, alpha, eps = scales.dt, scales.alpha, scales.epsilon
    trunc = NoiseTruncation(model.grid, model.n_modes)
    increments = wiener_increments(trunc, dt, scales.n_steps, stream)
    phi_steps = None if phi is None else phi.on_steps(dt, scales.n_steps)

    record_index = np.rint(trajectory.times / dt).astype(int)
    record_at = {int(k): j for j, k in enumerate(record_index)}
    Y = np.array(model.grid.check(as_values(y0)), dtype=float)
    fast_rec = np.empty_like(trajectory.fast)
    block_rec = np.empty_like(trajectory.slow)
    fast_rec[0] = Y
    block_rec[0] = trajectory.slow[0]
    for k in range(scales.n_steps):
        block_time = (k // scales.delta_steps) * scales.delta
        X_block = trajectory.slow[min(int(round(block_time / spacing)), trajectory.times.size - 1)]
        with np.errstate(over="ignore", invalid="ignore"):
            by = Y + (dt / alpha) * fast.explicit(X_block, Y)
            if not g2.is_zero:
                by = by + g2.apply(increments[k]) / np.sqrt(alpha)
                if phi_steps is not None:
                    by = by + (dt / np.sqrt(alpha * eps)) * g2.apply(phi_steps[k])
            Y = fast.implicit_solve(by, dt / alpha)
        if not np.all(np.isfinite(Y)):
            raise IntegrationError(f"Non-finite auxiliary state at step {k}.", k, (k + 1) * dt)
        j = record_at.get(k + 1)
        if j is not None:
            fast_rec[j] = Y
            block_rec[j] = X_block
    return Trajectory(
        model.grid,
        trajectory.times,
        block_rec,
        fast_rec,
        np.zeros(trajectory.times.size),
        trajectory.exit_time,
        False,
        trajectory.pivot,
    )


def _stopped_weights(times: np.ndarray, exit_time: np.ndarray) -> np.ndarray:
    # left-endpoint quadrature weights on [0, T ∧ τ]
    upper = np.minimum(times[1:], np.asarray(exit_time)[..., None])
    return np.clip(upper - times[:-1], 0.0, None)


def time_increment_statistic(traj: Union[Trajectory, Ensemble], delta: float) -> float:
    """
    ∫₀^{T∧τ} ‖X_t − X_{t(δ)}‖²_H dt on the recorded path, averaged over paths for an
    ensemble. The recording stride must divide δ.
    """
    times = traj.times
    spacing = _record_spacing(times)
    per_block = delta / spacing
    m = int(round(per_block))
    if m < 1 or abs(per_block - m) > 1e-6:
        raise ValueError(f"Recording stride {spacing:.6g} does not divide delta = {delta:.6g}.")
    block_index = np.minimum(np.floor(times / delta + 1e-9).astype(int) * m, times.size - 1)
    slow = traj.slow
    increments = traj.pivot.norm(slow - slow[..., block_index, :]) ** 2
    weights = _stopped_weights(times, traj.exit_time)
    values = np.sum(weights * increments[..., :-1], axis=-1)
    return float(np.mean(values))


def auxiliary_difference(trajectory: Trajectory, auxiliary: Trajectory) -> float:
    """∫₀^{T∧τ} ‖Y_t − Ŷ_t‖² dt on the shared recording grid."""
    if trajectory.times.shape != auxiliary.times.shape or not np.allclose(trajectory.times, auxiliary.times):
        raise ValueError("Trajectory and auxiliary process are recorded on different time grids.")
    diff = L2Pivot(trajectory.grid).norm(trajectory.fast - auxiliary.fast) ** 2
    weights = _stopped_weights(trajectory.times, trajectory.exit_time)
    return float(np.sum(weights * diff[:-1]))
