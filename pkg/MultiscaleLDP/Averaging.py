import logging
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.typing import ArrayLike

from .Models import BoundedLipschitzCoupling, LinearOU, ModelSpec
from .Noise import NoiseTruncation, SeedSpec, wiener_increments
from .Space import Functional, GridFunction, L2Pivot, MeanValue, ModeCoefficient, NodeValue, Path, as_values

logger = logging.getLogger(__name__)

__all__ = [
    "AveragingToleranceError",
    "FrozenRun",
    "ErgodicFit",
    "AveragedDrift",
    "solve_frozen",
    "frozen_time_average",
    "measure_ergodic_rate",
    "averaged_drift",
    "empirical_lipschitz",
]

FROZEN_DT = 0.01
CACHE_QUANTUM = 1e-9
RESOLVED_SIGMAS = 5.0


class AveragingToleranceError(RuntimeError):
    def __init__(self, stderr: float, tolerance: float):
        super().__init__(
            f"Averaged drift standard error {stderr:.3e} exceeds the tolerance {tolerance:.3e}; "
            "increase the sample horizon or the number of replicas."
        )
        self.stderr = stderr
        self.tolerance = tolerance


def _frozen_steps(horizon: float, dt: float) -> Tuple[int, float]:
    if not horizon > 0:
        raise ValueError(f"Frozen horizon must be positive, got {horizon}.")
    n_steps = max(1, math.ceil(horizon / dt - 1e-9))
    return n_steps, horizon / n_steps


def _frozen_batch(
    model: ModelSpec,
    x: np.ndarray,
    y0: np.ndarray,
    dt: float,
    increments: np.ndarray,
    record_stride: int = 1,
    average_from: Optional[int] = None,
):
    """
    Integrates dY = F₂(x, Y)dt + G₂dW for a batch of rows with the simulator's
    semi-implicit scheme. Optionally accumulates the time average of the coupling's
    fast part from step `average_from` on.
    """
    fast, g2, coupling = model.fast, model.noise.g2, model.coupling
    rows, n_steps = increments.shape[:2]
    Y = np.array(np.broadcast_to(y0, (rows, model.grid.n_interior)), dtype=float)
    n_rec = n_steps // record_stride + 1
    record = np.empty((rows, n_rec, Y.shape[1]))
    record[:, 0] = Y
    running = np.zeros_like(Y)
    for k in range(n_steps):
        if average_from is not None and k >= average_from:
            running += coupling.fast_part(Y)
        with np.errstate(over="ignore", invalid="ignore"):
            by = Y + dt * fast.explicit(x, Y)
            if not g2.is_zero:
                by = by + g2.apply(increments[:, k])
            Y = fast.implicit_solve(by, dt)
        if (k + 1) % record_stride == 0:
            record[:, (k + 1) // record_stride] = Y
    if not np.all(np.isfinite(Y)):
        raise FloatingPointError("Frozen equation produced a non-finite state; reduce the frozen time step.")
    if average_from is not None:
        running /= max(1, n_steps - average_from)
    return record, running


def solve_frozen(
    model: ModelSpec,
    x: ArrayLike,
    y0: ArrayLike,
    horizon: float,
    stream: np.random.Generator,
    dt: float = FROZEN_DT,
    record_stride: int = 1,
) -> Path:
    """Frozen fast equation dY = F₂(x, Y)dt + G₂dW̃ on the unit time scale."""
    x = model.grid.check(as_values(x))
    n_steps, dt = _frozen_steps(horizon, dt)
    trunc = NoiseTruncation(model.grid, model.n_modes)
    increments = wiener_increments(trunc, dt, n_steps, stream)[None]
    record, _ = _frozen_batch(model, x, model.grid.check(as_values(y0)), dt, increments, record_stride)
    times = dt * np.arange(0, n_steps + 1, record_stride)[: record.shape[1]]
    return Path(model.grid, times, record[0])


@dataclass
class FrozenRun:
    """Replica time averages of the coupling's fast part under the frozen equation at x."""

    x: np.ndarray = field(repr=False)
    burn_in: float
    sample_horizon: float
    dt: float
    n_replicas: int
    replica_means: np.ndarray = field(repr=False)

    @property
    def mean(self) -> np.ndarray:
        return self.replica_means.mean(axis=0)

    @property
    def stderr(self) -> np.ndarray:
        if self.n_replicas < 2:
            return np.full(self.replica_means.shape[1], np.inf)
        return self.replica_means.std(axis=0, ddof=1) / np.sqrt(self.n_replicas)


def frozen_time_average(
    model: ModelSpec,
    x: ArrayLike,
    burn_in: float,
    sample_horizon: float,
    n_replicas: int = 16,
    seed: int = 0,
    dt: float = FROZEN_DT,
) -> FrozenRun:
    """
    Time average of g(Y_t) over [burn_in, burn_in + sample_horizon] for n_replicas
    frozen paths started at 0. Replica r always uses stream (seed, r), so every x
    sees common random numbers.
    """
    kappa = model.fast.kappa
    if burn_in < 5 / kappa - 1e-12 or sample_horizon < 20 / kappa - 1e-12:
        raise ValueError(
            f"Frozen run needs burn_in >= 5/kappa = {5 / kappa:.4g} and sample_horizon >= 20/kappa = {20 / kappa:.4g}."
        )
    x = model.grid.check(as_values(x))
    n_steps, dt = _frozen_steps(burn_in + sample_horizon, dt)
    burn_steps = min(n_steps - 1, int(round(burn_in / dt)))
    seeds = SeedSpec(seed)
    trunc = NoiseTruncation(model.grid, model.n_modes)
    increments = np.stack(
        [wiener_increments(trunc, dt, n_steps, seeds.stream(r, "replica")) for r in range(n_replicas)]
    )
    _, means = _frozen_batch(model, x, np.zeros(model.grid.n_interior), dt, increments, n_steps, burn_steps)
    return FrozenRun(x, burn_in, sample_horizon, dt, n_replicas, means)


@dataclass
class ErgodicFit:
    """Least-squares fit of log|E f(Y_t) − μ^x f| = slope·t + intercept."""

    slope: float
    intercept: float
    expected_slope: float
    start_slopes: List[float] = field(default_factory=list)
    times: np.ndarray = field(default=None, repr=False)
    residuals: np.ndarray = field(default=None, repr=False)
    stderr: np.ndarray = field(default=None, repr=False)
    finding: Optional[str] = None


def _invariant_expectation(model: ModelSpec, x: np.ndarray, f: Functional) -> Optional[float]:
    if isinstance(model.fast, LinearOU) and isinstance(f, (ModeCoefficient, NodeValue, MeanValue)):
        mean, _ = model.fast.invariant_gaussian(x, model.noise.g2)
        return float(f(mean))
    return None


def measure_ergodic_rate(
    model: ModelSpec,
    x: ArrayLike,
    f_test: Functional,
    y_starts: Sequence[ArrayLike],
    horizon: Optional[float] = None,
    n_replicas: int = 64,
    seed: int = 0,
    dt: float = FROZEN_DT,
) -> ErgodicFit:
    """
    Fits the exponential decay of E f(Y_t^{x,y}) towards μ^x f for every start y and
    averages the slopes. Only times where the residual exceeds five standard errors
    enter the fit. μ^x f is exact for the linear OU drift with a linear test
    functional and a tail average otherwise.
    """
    x = model.grid.check(as_values(x))
    kappa = model.fast.kappa
    horizon = 20 / kappa if horizon is None else horizon
    n_steps, dt = _frozen_steps(horizon, dt)
    trunc = NoiseTruncation(model.grid, model.n_modes)
    seeds = SeedSpec(seed)
    times = dt * np.arange(n_steps + 1)

    curves = []
    for s, y0 in enumerate(y_starts):
        y0 = model.grid.check(as_values(y0))
        increments = np.stack(
            [
                wiener_increments(trunc, dt, n_steps, seeds.stream(s * n_replicas + r, "frozen"))
                for r in range(n_replicas)
            ]
        )
        record, _ = _frozen_batch(model, x, y0, dt, increments)
        values = f_test(record)
        se = values.std(axis=0, ddof=1) / np.sqrt(n_replicas) if n_replicas > 1 else np.zeros(n_steps + 1)
        curves.append((values.mean(axis=0), se))

    target = _invariant_expectation(model, x, f_test)
    if target is None:
        tail = times >= 0.75 * horizon
        target = float(np.mean([mean[tail].mean() for mean, _ in curves]))

    slopes, intercepts = [], []
    all_residuals, all_stderr = [], []
    for mean, se in curves:
        residual = np.abs(mean - target)
        all_residuals.append(residual)
        all_stderr.append(se)
        resolved = (residual > RESOLVED_SIGMAS * se) & (residual > 0) & (times > 0)
        if np.count_nonzero(resolved) < 3:
            continue
        slope, intercept = np.polyfit(times[resolved], np.log(residual[resolved]), 1)
        slopes.append(float(slope))
        intercepts.append(float(intercept))

    fit = ErgodicFit(
        slope=float(np.mean(slopes)) if slopes else np.nan,
        intercept=float(np.mean(intercepts)) if intercepts else np.nan,
        expected_slope=-kappa / 2,
        start_slopes=slopes,
        times=times,
        residuals=np.array(all_residuals),
        stderr=np.array(all_stderr),
    )
    if not slopes:
        fit.finding = "no start point resolved a decay above the Monte Carlo noise"
        logger.warning(f"Ergodic rate fit for {model.name}: {fit.finding}.")
    elif fit.slope >= 0:
        fit.finding = f"non-decaying fit (slope {fit.slope:.3g} >= 0)"
        logger.warning(f"Ergodic rate fit for {model.name}: {fit.finding}.")
    else:
        logger.info(f"Ergodic rate for {model.name}: slope {fit.slope:.4g} (declared bound {fit.expected_slope:.4g}).")
    return fit


class AveragedDrift:
    """
    F̄₁(x) = ∫ F₁(x, y) μ^x(dy).

    The "analytic" backend is exact for the linear OU fast drift (Gaussian invariant
    measure, Gauss–Hermite quadrature for a saturating coupling). The "ergodic_mc"
    backend time-averages frozen paths and reports standard errors. Values are
    memoized on x quantized to 1e-9.
    """

    def __init__(
        self,
        model: ModelSpec,
        backend: Literal["analytic", "ergodic_mc"] = "analytic",
        burn_in: Optional[float] = None,
        sample_horizon: Optional[float] = None,
        n_replicas: int = 16,
        seed: int = 0,
        tolerance: Optional[float] = None,
        dt: float = FROZEN_DT,
        cache_size: int = 4096,
        quadrature_nodes: int = 40,
    ):
        if backend not in ("analytic", "ergodic_mc"):
            raise ValueError(f"Unsupported averaging backend: {backend}")
        if backend == "analytic" and model.coupling.depends_on_fast and not isinstance(model.fast, LinearOU):
            raise ValueError(f"The analytic backend needs a linear_ou fast drift, got {model.fast.kind}.")
        kappa = model.fast.kappa
        self.model = model
        self.backend = backend
        self.burn_in = 5 / kappa if burn_in is None else burn_in
        self.sample_horizon = 20 / kappa if sample_horizon is None else sample_horizon
        if self.burn_in < 5 / kappa - 1e-12 or self.sample_horizon < 20 / kappa - 1e-12:
            raise ValueError(f"burn_in must be >= 5/kappa and sample_horizon >= 20/kappa (kappa = {kappa:.4g}).")
        self.n_replicas = n_replicas
        self.seed = seed
        self.tolerance = tolerance
        self.dt = dt
        self.cache_size = cache_size
        self._cache: "OrderedDict[bytes, Tuple[np.ndarray, np.ndarray]]" = OrderedDict()
        self._lock = threading.Lock()
        self._nodes, self._weights = hermegauss(quadrature_nodes)
        self._weights = self._weights / np.sqrt(2 * np.pi)

    @property
    def exact(self) -> bool:
        return self.backend == "analytic" or not self.model.coupling.depends_on_fast

    @property
    def differentiable(self) -> bool:
        return self.exact

    @property
    def lipschitz_bound(self) -> float:
        """|c_slow| + |c_fast|·2·C_h3/κ from the contraction of the frozen equation."""
        coupling, fast = self.model.coupling, self.model.fast
        return abs(coupling.c_slow) + abs(coupling.c_fast) * 2 * fast.h3_constant(self.model.pivot.name) / fast.kappa

    def _key(self, x: np.ndarray) -> bytes:
        return np.rint(x / CACHE_QUANTUM).astype(np.int64).tobytes()

    def _gaussian(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.model.fast.invariant_gaussian(x, self.model.noise.g2)

    def _fast_expectation(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        coupling = self.model.coupling
        if self.backend == "analytic":
            mean, variance = self._gaussian(x)
            if isinstance(coupling, BoundedLipschitzCoupling):
                z = mean[:, None] + np.sqrt(variance)[:, None] * self._nodes
                return coupling.fast_part(z) @ self._weights, np.zeros_like(x)
            return coupling.fast_part(mean), np.zeros_like(x)
        run = frozen_time_average(self.model, x, self.burn_in, self.sample_horizon, self.n_replicas, self.seed, self.dt)
        return run.mean, run.stderr

    def __call__(self, x: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
        x = self.model.grid.check(as_values(x))
        coupling = self.model.coupling
        if not coupling.depends_on_fast:
            return coupling.c_slow * x, np.zeros_like(x)
        key = self._key(x)
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit[0].copy(), hit[1].copy()
        expectation, se = self._fast_expectation(x)
        value = coupling.c_slow * x + coupling.c_fast * expectation
        stderr = abs(coupling.c_fast) * se
        if self.tolerance is not None and np.max(stderr) > self.tolerance:
            raise AveragingToleranceError(float(np.max(stderr)), self.tolerance)
        with self._lock:
            self._cache[key] = (value, stderr)
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return value.copy(), stderr.copy()

    def batch(self, X: np.ndarray) -> np.ndarray:
        """Values for a stack of states along the last axis, standard errors dropped."""
        X = np.atleast_2d(X)
        if not self.model.coupling.depends_on_fast:
            return self.model.coupling.c_slow * X
        return np.stack([self(row)[0] for row in X])

    def vjp(self, x: ArrayLike, w: ArrayLike) -> np.ndarray:
        """(DF̄₁(x))ᵀ w for the exact backends."""
        x, w = as_values(x), as_values(w)
        coupling = self.model.coupling
        if not coupling.depends_on_fast:
            return coupling.c_slow * w
        if not self.differentiable:
            raise ValueError("The ergodic_mc averaged drift has no derivative; use the analytic backend.")
        fast = self.model.fast
        weighted = w
        if isinstance(coupling, BoundedLipschitzCoupling):
            mean, variance = self._gaussian(x)
            z = mean[:, None] + np.sqrt(variance)[:, None] * self._nodes
            weighted = w * (coupling.fast_part_derivative(z) @ self._weights)
        # the mean map b·M·S is symmetric
        back = fast.b * fast.slow_map(fast.basis.modewise(weighted, 1 / fast.symbol()))
        return coupling.c_slow * w + coupling.c_fast * back

    def check_ready(self):
        """Rejects an MC backend whose standard error at x = 0 exceeds the tolerance."""
        if self.exact or self.tolerance is None:
            return
        self(np.zeros(self.model.grid.n_interior))


def averaged_drift(ad: AveragedDrift, x: ArrayLike) -> Tuple[GridFunction, np.ndarray]:
    values, stderr = ad(x)
    return GridFunction(ad.model.grid, values), stderr


def empirical_lipschitz(ad: AveragedDrift, pairs: Sequence[Tuple[ArrayLike, ArrayLike]]) -> float:
    """Largest ‖F̄₁(u) − F̄₁(v)‖ / ‖u − v‖ over the given pairs, in L²."""
    pivot = L2Pivot(ad.model.grid)
    ratios = []
    for u, v in pairs:
        u, v = as_values(u), as_values(v)
        gap = float(pivot.norm(u - v))
        if gap < 1e-12:
            continue
        ratios.append(float(pivot.norm(ad(u)[0] - ad(v)[0])) / gap)
    return max(ratios) if ratios else 0.0
