import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import polars as pl
from scipy.special import logsumexp
from scipy.stats import norm

from .Averaging import averaged_drift, measure_ergodic_rate
from .Conditions import SuiteReport, random_state, run_condition_suite
from .Config import ExperimentConfig
from .Noise import ControlPath, SeedSpec
from .Rate import (
    CompactnessReport,
    RateProblem,
    RateResult,
    TerminalCost,
    TerminalSet,
    level_set_sample,
    minimize_rate,
)
from .Simulate import (
    Ensemble,
    ScaleParams,
    auxiliary_difference,
    run_auxiliary,
    run_ensemble,
    time_increment_statistic,
)
from .Skeleton import solve_skeleton
from .Space import Path, QuadraticCost, path_metric

logger = logging.getLogger(__name__)

__all__ = [
    "ConvergenceTable",
    "ProbabilityEstimate",
    "LdpFitReport",
    "LevelScan",
    "LaplaceReport",
    "weak_convergence_experiment",
    "estimate_event_probability",
    "reference_rate",
    "ldp_scaling_fit",
    "level_probability_scan",
    "laplace_principle_experiment",
    "compactness_study",
    "compactness_frame",
    "check_conditions",
    "averaged_drift_table",
    "conditions_frame",
]

Z95 = float(norm.ppf(0.975))
UNRESOLVED_RELATIVE_STDERR = 0.5
AUXILIARY_PATHS = 8


def _interpolate(path: Path, times: np.ndarray) -> Path:
    values = np.stack([np.interp(times, path.times, path.values[:, i]) for i in range(path.grid.n_interior)], axis=1)
    return Path(path.grid, times, values)


def _ols(x: np.ndarray, y: np.ndarray, y_err: Optional[np.ndarray] = None):
    """y = intercept + slope·x. Returns (intercept, slope, band), band = 1.96σ of the intercept."""
    design = np.stack([np.ones_like(x), x], axis=1)
    projector = np.linalg.pinv(design)
    intercept, slope = projector @ y
    band = np.nan if y_err is None else Z95 * float(np.sqrt(np.sum(projector[0] ** 2 * y_err**2)))
    return float(intercept), float(slope), band


@dataclass
class ConvergenceTable:
    """Mean distance from controlled trajectories to the skeleton, one row per scale point."""

    epsilons: np.ndarray
    alphas: np.ndarray
    n_paths: np.ndarray = field(repr=False)
    mean_metric: np.ndarray
    stderr: np.ndarray = field(repr=False)
    time_increment: np.ndarray = field(repr=False)
    auxiliary_difference: np.ndarray = field(repr=False)
    failed: np.ndarray = field(repr=False)
    decay_exponent: float = np.nan
    findings: List[str] = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.mean_metric) < 0))

    @property
    def ratio(self) -> float:
        return float(self.mean_metric[-1] / self.mean_metric[0])

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "epsilon": self.epsilons,
                "alpha": self.alphas,
                "n_paths": self.n_paths,
                "failed": self.failed,
                "mean_metric": self.mean_metric,
                "stderr": self.stderr,
                "time_increment": self.time_increment,
                "auxiliary_difference": self.auxiliary_difference,
            }
        )


def weak_convergence_experiment(
    config: ExperimentConfig, phi: Optional[ControlPath] = None, progress: bool = True
) -> ConvergenceTable:
    """
    Distance in the path metric between controlled trajectories X^{ε,α,φ} and the
    skeleton X̄^φ at every point of the scale grid. A rise larger than two joint
    standard errors is a finding; so are trajectories that left the 1e6 ball.
    """
    model = config.model
    phi = phi or config.control_path()
    skeleton = solve_skeleton(config.skeleton_problem(phi))
    points = config.scales.points()
    n = config.ensemble.n_paths
    rows = []
    for j, scales in enumerate(points):
        offset = j * n
        ensemble = run_ensemble(
            model,
            scales,
            config.x0,
            config.y0,
            phi,
            n_paths=n,
            seed=config.seed,
            stopping=config.ensemble.stopping,
            threads=config.ensemble.threads,
            chunk_size=config.ensemble.chunk_size,
            index_offset=offset,
            progress=progress,
        )
        reference = _interpolate(skeleton, ensemble.times)
        ok = np.flatnonzero(~ensemble.failed)
        metrics = np.array(
            [
                path_metric(
                    ensemble.trajectory(i).slow_path,
                    reference,
                    model.gamma1,
                    model.norm_choice,
                    pivot=model.pivot,
                    v_norm=model.v_norm,
                )
                for i in ok
            ]
        )
        seeds = SeedSpec(config.seed)
        aux = [
            auxiliary_difference(
                ensemble.trajectory(i),
                run_auxiliary(model, scales, ensemble.trajectory(i), config.y0, seeds.stream(offset + i), phi),
            )
            for i in ok[:AUXILIARY_PATHS]
        ]
        rows.append(
            dict(
                epsilon=scales.epsilon,
                alpha=scales.alpha,
                n_paths=ok.size,
                failed=int(ensemble.failed.sum()),
                mean=float(metrics.mean()) if metrics.size else np.nan,
                stderr=float(metrics.std(ddof=1) / np.sqrt(metrics.size)) if metrics.size > 1 else np.nan,
                time_increment=time_increment_statistic(_surviving(ensemble, ok), scales.delta),
                auxiliary=float(np.mean(aux)) if aux else np.nan,
            )
        )
        logger.info(f"eps={scales.epsilon:.4g}: mean metric {rows[-1]['mean']:.4g} over {ok.size} paths.")

    table = ConvergenceTable(
        epsilons=np.array([r["epsilon"] for r in rows]),
        alphas=np.array([r["alpha"] for r in rows]),
        n_paths=np.array([r["n_paths"] for r in rows]),
        mean_metric=np.array([r["mean"] for r in rows]),
        stderr=np.array([r["stderr"] for r in rows]),
        time_increment=np.array([r["time_increment"] for r in rows]),
        auxiliary_difference=np.array([r["auxiliary"] for r in rows]),
        failed=np.array([r["failed"] for r in rows]),
    )
    if len(rows) > 1 and np.all(table.mean_metric > 0):
        table.decay_exponent = float(np.polyfit(np.log(table.epsilons), np.log(table.mean_metric), 1)[0])
    for j in range(len(rows) - 1):
        rise = table.mean_metric[j + 1] - table.mean_metric[j]
        noise = 2 * np.hypot(table.stderr[j], table.stderr[j + 1])
        if rise > noise:
            table.findings.append(
                f"metric rises from {table.mean_metric[j]:.4g} to {table.mean_metric[j + 1]:.4g} "
                f"between eps={table.epsilons[j]:.4g} and eps={table.epsilons[j + 1]:.4g}"
            )
    for r in rows:
        if r["failed"]:
            table.findings.append(f"{r['failed']} trajectories left the 1e6 ball at eps={r['epsilon']:.4g}")
    for finding in table.findings:
        logger.warning(f"Weak convergence for {model.name}: {finding}.")
    return table


def _surviving(ensemble: Ensemble, index: np.ndarray) -> Ensemble:
    return Ensemble(
        ensemble.grid,
        ensemble.times,
        ensemble.slow[index],
        ensemble.fast[index],
        ensemble.log_girsanov[index],
        ensemble.exit_time[index],
        ensemble.failed[index],
        ensemble.pivot,
    )


@dataclass
class ProbabilityEstimate:
    epsilon: float
    alpha: float
    n: int
    hits: int
    p_hat: float
    stderr: float
    lower: float
    upper: float
    sampler: str
    flagged: bool = False

    @property
    def resolved(self) -> bool:
        return self.hits > 0 and self.p_hat > 0 and self.stderr <= UNRESOLVED_RELATIVE_STDERR * self.p_hat

    @property
    def eps_log_p(self) -> float:
        return self.epsilon * np.log(self.p_hat) if self.p_hat > 0 else -np.inf

    @property
    def eps_log_p_err(self) -> float:
        # delta method on ε log p̂
        return self.epsilon * self.stderr / self.p_hat if self.p_hat > 0 else np.inf


def _wilson(hits: int, n: int):
    p = hits / n
    denominator = 1 + Z95**2 / n
    center = (p + Z95**2 / (2 * n)) / denominator
    half = Z95 * np.sqrt(p * (1 - p) / n + Z95**2 / (4 * n**2)) / denominator
    return max(0.0, center - half), min(1.0, center + half)


def estimate_event_probability(
    config: ExperimentConfig,
    scales: ScaleParams,
    sampler: Optional[str] = None,
    phi_tilt: Optional[ControlPath] = None,
    n_paths: Optional[int] = None,
    index_offset: int = 0,
    progress: bool = True,
) -> ProbabilityEstimate:
    """
    P(g(X_T) ≥ a) at one scale point. "naive" counts hits with a Wilson interval;
    "girsanov" simulates under the tilt φ and averages 1{hit}·exp(log weight),
    with a normal interval clipped to [0, 1]. Zero hits return p̂ = 0 with the
    interval's upper bound and are flagged. a = −∞ gives p̂ = 1 exactly.
    """
    event = config.event
    sampler = sampler or event.sampler
    if sampler not in ("naive", "girsanov"):
        raise ValueError(f"Unsupported sampler: {sampler}")
    n = n_paths or config.ensemble.n_paths
    if event.level == -np.inf:
        return ProbabilityEstimate(scales.epsilon, scales.alpha, n, n, 1.0, 0.0, 1.0, 1.0, sampler)
    if sampler == "girsanov" and phi_tilt is None:
        raise ValueError("The girsanov sampler needs a tilting control.")
    ensemble = run_ensemble(
        config.model,
        scales,
        config.x0,
        config.y0,
        phi_tilt if sampler == "girsanov" else None,
        n_paths=n,
        seed=config.seed,
        stopping=config.ensemble.stopping,
        threads=config.ensemble.threads,
        chunk_size=config.ensemble.chunk_size,
        index_offset=index_offset,
        progress=progress,
    )
    hit = (event.functional(ensemble.terminal) >= event.level) & ~ensemble.failed
    hits = int(hit.sum())
    if sampler == "naive":
        p = hits / n
        stderr = float(np.sqrt(p * (1 - p) / n))
        lower, upper = _wilson(hits, n)
    else:
        samples = np.where(hit, ensemble.weights, 0.0)
        p = float(samples.mean())
        stderr = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else np.inf
        lower, upper = max(0.0, p - Z95 * stderr), min(1.0, p + Z95 * stderr)
        if hits == 0:
            upper = _wilson(0, n)[1]
    estimate = ProbabilityEstimate(scales.epsilon, scales.alpha, n, hits, p, stderr, lower, upper, sampler)
    if hits == 0:
        estimate.flagged = True
        logger.warning(f"No hits among {n} {sampler} samples at eps={scales.epsilon:.4g}; p < {upper:.3g}.")
    else:
        logger.info(f"eps={scales.epsilon:.4g}: p = {p:.4g} ± {stderr:.2g} ({hits}/{n} hits, {sampler}).")
    return estimate


def _frame(estimates: Sequence[ProbabilityEstimate]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "epsilon": [e.epsilon for e in estimates],
            "alpha": [e.alpha for e in estimates],
            "n": [e.n for e in estimates],
            "hits": [e.hits for e in estimates],
            "p_hat": [e.p_hat for e in estimates],
            "stderr": [e.stderr for e in estimates],
            "lower": [e.lower for e in estimates],
            "upper": [e.upper for e in estimates],
            "sampler": [e.sampler for e in estimates],
        }
    )


def reference_rate(config: ExperimentConfig) -> RateResult:
    """I at the configured event from the rate optimizer, on the rate time step."""
    skeleton = config.skeleton_problem(dt=config.rate_dt)
    target = TerminalSet(config.event.functional, config.event.level)
    return minimize_rate(RateProblem(skeleton, target, config.rate))


@dataclass
class LdpFitReport:
    """Fit of ε log p̂(ε) = −I_∞ + bε against the optimizer's rate I."""

    estimates: List[ProbabilityEstimate] = field(repr=False)
    I_inf: float
    band: float
    slope: float
    I_reference: float
    relative_gap: float
    n_used: int
    phi_star: Optional[ControlPath] = field(default=None, repr=False)
    findings: List[str] = field(default_factory=list)

    def probabilities_frame(self) -> pl.DataFrame:
        return _frame(self.estimates)

    def fit_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "I_inf": [self.I_inf],
                "band": [self.band],
                "slope": [self.slope],
                "I_reference": [self.I_reference],
                "relative_gap": [self.relative_gap],
                "n_points": [self.n_used],
            }
        )


def ldp_scaling_fit(config: ExperimentConfig, progress: bool = True) -> LdpFitReport:
    """
    Estimates p̂(ε) over the scale grid, with Girsanov tilting at the optimizer's φ*
    when so configured, and regresses ε log p̂ on ε. The fit stops at the first
    unresolved point (no hits or relative stderr above 50%) and reports the rest.
    """
    rate = reference_rate(config)
    estimates = []
    for j, scales in enumerate(config.scales.points()):
        estimates.append(
            estimate_event_probability(
                config,
                scales,
                phi_tilt=rate.phi_star,
                index_offset=j * config.ensemble.n_paths,
                progress=progress,
            )
        )
    findings = []
    used = []
    for e in estimates:
        if not (e.resolved or e.p_hat == 1.0):
            findings.append(f"fit truncated at eps={e.epsilon:.4g}: probability not resolved")
            break
        used.append(e)
    if len(used) >= 2:
        eps = np.array([e.epsilon for e in used])
        y = np.array([e.eps_log_p for e in used])
        y_err = np.array([e.eps_log_p_err for e in used])
        intercept, slope, band = _ols(eps, y, y_err)
        I_inf = -intercept
    else:
        I_inf, slope, band = np.nan, np.nan, np.nan
        findings.append(f"only {len(used)} resolved points; no fit")
    I_ref = rate.I_value
    if not np.isfinite(I_ref):
        gap = np.inf
        findings.append("optimizer rate is infinite (target unreachable); relative gap unresolved")
    elif not np.isfinite(I_inf):
        gap = np.inf
    else:
        gap = abs(I_inf - I_ref) / I_ref if I_ref > 0 else abs(I_inf)
    for finding in findings:
        logger.warning(f"LDP fit for {config.model.name}: {finding}.")
    logger.info(f"LDP fit: I_inf = {I_inf:.4g} ± {band:.2g}, optimizer I = {I_ref:.4g}, gap {gap:.2%}.")
    return LdpFitReport(estimates, I_inf, band, slope, I_ref, float(gap), len(used), rate.phi_star, findings)


@dataclass
class LevelScan:
    """ε log p̂ over a grid of levels from one naive ensemble."""

    epsilon: float
    levels: np.ndarray
    n: int
    hits: np.ndarray = field(repr=False)
    p_hat: np.ndarray
    stderr: np.ndarray = field(repr=False)
    findings: List[str] = field(default_factory=list)

    @property
    def eps_log_p(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.epsilon * np.log(self.p_hat)

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "level": self.levels,
                "n": np.full(self.levels.size, self.n),
                "hits": self.hits,
                "p_hat": self.p_hat,
                "stderr": self.stderr,
                "eps_log_p": self.eps_log_p,
            }
        )


def level_probability_scan(
    config: ExperimentConfig,
    levels: Optional[Sequence[float]] = None,
    scales: Optional[ScaleParams] = None,
    progress: bool = True,
) -> LevelScan:
    """
    p̂(a) for every level a from a single naive ensemble at the largest ε. A rise of
    ε log p̂ with a by more than three joint standard errors is a finding.
    """
    levels = np.sort(np.asarray(levels if levels is not None else config.event.levels, dtype=float))
    if levels.size == 0:
        raise ValueError("Level scan needs at least one level.")
    scales = scales or config.scales.points()[0]
    n = config.ensemble.n_paths
    ensemble = run_ensemble(
        config.model,
        scales,
        config.x0,
        config.y0,
        None,
        n_paths=n,
        seed=config.seed,
        stopping=config.ensemble.stopping,
        threads=config.ensemble.threads,
        chunk_size=config.ensemble.chunk_size,
        progress=progress,
    )
    g = np.where(ensemble.failed, -np.inf, config.event.functional(ensemble.terminal))
    hits = np.array([int(np.sum(g >= a)) for a in levels])
    p = hits / n
    stderr = np.sqrt(p * (1 - p) / n)
    scan = LevelScan(scales.epsilon, levels, n, hits, p, stderr)
    y = scan.eps_log_p
    with np.errstate(divide="ignore", invalid="ignore"):
        y_err = scales.epsilon * stderr / p
    for j in range(levels.size - 1):
        if hits[j + 1] == 0:
            break
        if y[j + 1] > y[j] + 3 * np.hypot(y_err[j], y_err[j + 1]):
            scan.findings.append(f"eps log p rises between levels {levels[j]:.4g} and {levels[j + 1]:.4g}")
    for finding in scan.findings:
        logger.warning(f"Level scan: {finding}.")
    return scan


@dataclass
class LaplaceReport:
    """−ε log E exp(−h(X_T)/ε) over the scale grid against inf_φ{h(X̄_T^φ) + ½∫‖φ‖²}."""

    epsilons: np.ndarray
    values: np.ndarray
    stderr: np.ndarray = field(repr=False)
    limit: float
    band: float
    variational: float
    relative_gap: float
    findings: List[str] = field(default_factory=list)

    def to_frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            {
                "epsilon": self.epsilons,
                "value": self.values,
                "stderr": self.stderr,
                "limit": np.full(self.epsilons.size, self.limit),
                "variational": np.full(self.epsilons.size, self.variational),
                "relative_gap": np.full(self.epsilons.size, self.relative_gap),
            }
        )


def laplace_principle_experiment(config: ExperimentConfig, progress: bool = True) -> LaplaceReport:
    """
    Monte Carlo side: −ε log E exp(−h(X_T)/ε) for h = β(g − a)², sampled under the
    tilt that minimizes the variational side, and extrapolated linearly to ε = 0.
    """
    event = config.event
    cost = QuadraticCost(event.functional, event.level, event.beta)
    skeleton = config.skeleton_problem(dt=config.rate_dt)
    variational = minimize_rate(RateProblem(skeleton, TerminalCost(cost), config.rate))
    tilt = variational.phi_star
    n = config.ensemble.n_paths
    epsilons, values, errors = [], [], []
    for j, scales in enumerate(config.scales.points()):
        ensemble = run_ensemble(
            config.model,
            scales,
            config.x0,
            config.y0,
            tilt,
            n_paths=n,
            seed=config.seed,
            stopping=config.ensemble.stopping,
            threads=config.ensemble.threads,
            chunk_size=config.ensemble.chunk_size,
            index_offset=j * n,
            progress=progress,
        )
        ok = ~ensemble.failed
        exponents = -cost(ensemble.terminal[ok]) / scales.epsilon + ensemble.log_girsanov[ok, -1]
        log_mean = logsumexp(exponents) - np.log(n)
        ratios = np.exp(exponents - exponents.max())
        relative = ratios.std(ddof=1) / np.sqrt(n) / (ratios.sum() / n) if ok.sum() > 1 else np.inf
        epsilons.append(scales.epsilon)
        values.append(float(-scales.epsilon * log_mean))
        errors.append(float(scales.epsilon * relative))
    epsilons, values, errors = np.array(epsilons), np.array(values), np.array(errors)
    findings = []
    if epsilons.size >= 2:
        limit, _, band = _ols(epsilons, values, errors)
    else:
        limit, band = float(values[0]), float(Z95 * errors[0])
        findings.append("a single scale point; the limit is the raw estimate")
    target = variational.objective
    gap = abs(limit - target) / abs(target) if target != 0 else abs(limit)
    for finding in findings:
        logger.warning(f"Laplace experiment: {finding}.")
    logger.info(f"Laplace limit {limit:.4g} ± {band:.2g} against variational value {target:.4g} (gap {gap:.2%}).")
    return LaplaceReport(epsilons, values, errors, limit, band, target, float(gap), findings)


def compactness_study(config: ExperimentConfig) -> List[CompactnessReport]:
    """Level-set samples of the skeleton for every configured energy bound M."""
    prob = config.skeleton_problem()
    return [
        level_set_sample(M, config.compactness_samples, prob, seed=config.seed, C=config.compactness_C)
        for M in config.compactness_M
    ]


def compactness_frame(reports: Sequence[CompactnessReport]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "M": [r.M for r in reports],
            "n_samples": [r.n_samples for r in reports],
            "sup_energy": [r.sup_energy for r in reports],
            "fitted_C": [r.fitted_C for r in reports],
            "diameter": [r.diameter for r in reports],
            "blowups": [r.blowups for r in reports],
        }
    )


def check_conditions(config: ExperimentConfig) -> List[SuiteReport]:
    return run_condition_suite(config.model, config.check_pairs, config.check_radius, config.seed)


def conditions_frame(suites: Sequence[SuiteReport]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "check": [s.name for s in suites],
            "n_samples": [s.n_samples for s in suites],
            "n_violations": [s.n_violations for s in suites],
            "n_skipped": [s.n_skipped for s in suites],
            "max_value": [float(s.max_value) for s in suites],
        }
    )


def averaged_drift_table(config: ExperimentConfig):
    """
    F̄₁ with its standard error at x0 and at averaging.n_samples random states, plus
    the ergodic-rate fit when start amplitudes are configured. Returns
    (drift frame, ergodic frame or None).
    """
    model = config.model
    drift = config.drift()
    rng = SeedSpec(config.seed).stream(0, "check")
    states = [config.x0]
    states += [random_state(model.grid, rng, config.check_radius) for _ in range(config.averaging.n_samples)]
    parts = []
    for s, x in enumerate(states):
        values, stderr = averaged_drift(drift, x)
        parts.append(
            pl.DataFrame(
                {
                    "sample": np.full(model.grid.n_interior, s),
                    "node": np.arange(1, model.grid.n_interior + 1),
                    "x": x,
                    "F_bar": values.values,
                    "stderr": np.broadcast_to(stderr, values.values.shape),
                }
            )
        )
    ergodic = None
    if config.averaging.ergodic_starts:
        starts = [model.grid.sine(1, a).values for a in config.averaging.ergodic_starts]
        fit = measure_ergodic_rate(model, config.x0, config.event.functional, starts, seed=config.seed)
        ergodic = pl.DataFrame(
            {
                "slope": [fit.slope],
                "expected_slope": [fit.expected_slope],
                "resolved_starts": [len(fit.start_slopes)],
                "finding": [fit.finding or ""],
            }
        )
    return pl.concat(parts), ergodic
