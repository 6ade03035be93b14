import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .Models import CouplingF1, FastDrift, ModelSpec, SlowNoise, SlowOperator
from .Noise import SeedSpec
from .Space import Grid, L2Pivot, Pivot, Vector, as_values

logger = logging.getLogger(__name__)

__all__ = [
    "CheckReport",
    "SuiteReport",
    "check_hypothesis_A2",
    "check_coercivity_A4",
    "check_hypothesis_H2_H3",
    "check_h3_lipschitz_in_x",
    "check_growth_A3",
    "check_growth_H4",
    "check_coupling_lipschitz",
    "random_state",
    "run_condition_suite",
]

RELATIVE_TOL = 1e-9
SKIP_BELOW = 1e-12


@dataclass
class CheckReport:
    """
    Outcome of one inequality evaluation. `value` is the left-hand side minus the
    right-hand side, so a value above the tolerance is a finding.
    """

    name: str
    value: float
    addends: Dict[str, float] = field(default_factory=dict)
    parts: Dict[str, float] = field(default_factory=dict)
    ok: bool = True
    tolerance: float = 0.0
    skipped: bool = False


def _report(name: str, addends: Dict[str, float], parts: Optional[Dict[str, float]] = None) -> CheckReport:
    addends = {k: float(v) for k, v in addends.items()}
    tolerance = RELATIVE_TOL * max(1.0, sum(abs(v) for v in addends.values()))
    if parts is None:
        value = sum(addends.values())
        parts = {}
    else:
        parts = {k: float(v) for k, v in parts.items()}
        value = max(parts.values())
    return CheckReport(name, float(value), addends, parts, bool(value <= tolerance), tolerance)


def _dual_norm(values: np.ndarray, pivot: Pivot, v_norm) -> float:
    # sup over sine directions of ⟨a, e_k⟩ / ‖e_k‖_V
    E = pivot.grid.basis.vectors
    pairings = np.abs(pivot.inner(values[None, :], E))
    return float(np.max(pairings / v_norm(E)))


def check_hypothesis_A2(
    op: SlowOperator,
    g1: SlowNoise,
    u: Vector,
    v: Vector,
    theta1: Optional[float] = None,
    K: Optional[float] = None,
    rho: Optional[Callable[[np.ndarray], float]] = None,
) -> CheckReport:
    """
    Local monotonicity:
    2⟨A(u)−A(v), u−v⟩ + ‖G₁(u)−G₁(v)‖²_HS + θ₁‖u−v‖_V^γ₁ − (K + ρ(v))‖u−v‖²_H.

    Operators on the alternative coercivity path drop the θ₁ term.
    Missing constants default to the operator's declared ones.
    """
    u, v = as_values(u), as_values(v)
    declared = op.constants(g1)
    theta1 = declared.theta1 if theta1 is None else theta1
    K = declared.K if K is None else K
    rho = declared.rho if rho is None else rho
    pivot = op.pivot
    d = u - v
    pairing = pivot.inner(op(u) - op(v), d)
    addends = {
        "monotone": 2 * pairing,
        "noise": g1.hs_difference_sq(u, v, pivot),
        "coercive": 0.0 if op.uses_a4 else theta1 * op.v_norm(d) ** op.gamma1,
        "penalty": -(K + rho(v)) * pivot.inner(d, d),
    }
    return _report("A2", addends)


def check_coercivity_A4(
    op: SlowOperator, g1: SlowNoise, u: Vector, theta1: Optional[float] = None, K: Optional[float] = None
) -> CheckReport:
    """2⟨A(u), u⟩ + ‖G₁(u)‖²_HS + θ₁‖u‖_V^γ₁ − K(1 + ‖u‖²_H)."""
    u = as_values(u)
    declared = op.constants(g1)
    theta1 = declared.coercive_theta1 if theta1 is None else theta1
    K = declared.coercive_K if K is None else K
    if theta1 is None or K is None:
        raise ValueError(f"{op.kind} declares no coercivity constants.")
    pivot = op.pivot
    addends = {
        "drift": 2 * pivot.inner(op(u), u),
        "noise": g1.hs_norm_sq(u, pivot),
        "coercive": theta1 * op.v_norm(u) ** op.gamma1,
        "bound": -K * (1 + pivot.inner(u, u)),
    }
    return _report("A4", addends)


def check_hypothesis_H2_H3(
    drift: FastDrift,
    x: Vector,
    y1: Vector,
    y2: Vector,
    kappa: Optional[float] = None,
    theta2: Optional[float] = None,
    C: Optional[float] = None,
) -> CheckReport:
    """
    Strict monotonicity 2⟨F₂(x,y₁)−F₂(x,y₂), y₁−y₂⟩ + κ‖y₁−y₂‖² and coercivity
    ⟨F₂(x,y₁), y₁⟩ − C‖y₁‖² + θ₂‖y₁‖_V^γ₂ − C(1+‖x‖²),
    both in the L² pivot of the fast space.
    """
    x, y1, y2 = as_values(x), as_values(y1), as_values(y2)
    declared_C, declared_theta2, gamma2 = drift.coercivity_constants()
    kappa = drift.kappa if kappa is None else kappa
    theta2 = declared_theta2 if theta2 is None else theta2
    C = declared_C if C is None else C
    pivot = L2Pivot(drift.grid)
    d = y1 - y2
    monotone = 2 * pivot.inner(drift(x, y1) - drift(x, y2), d)
    gap = kappa * pivot.inner(d, d)
    drift_y = pivot.inner(drift(x, y1), y1)
    coercive = theta2 * drift.v_norm(y1) ** gamma2
    bound = -C * pivot.inner(y1, y1) - C * (1 + pivot.inner(x, x))
    addends = {"monotone": monotone, "gap": gap, "drift": drift_y, "coercive": coercive, "bound": bound}
    parts = {"monotonicity": monotone + gap, "coercivity": drift_y + coercive + bound}
    return _report("H2_H3", addends, parts)


def check_h3_lipschitz_in_x(
    drift: FastDrift,
    x1: Vector,
    x2: Vector,
    y: Vector,
    w: Vector,
    C: Optional[float] = None,
    slow_norm: Optional[Pivot] = None,
) -> CheckReport:
    """
    Ratio ⟨F₂(x₁,y)−F₂(x₂,y), w⟩ / (‖x₁−x₂‖‖w‖) against C. The slow difference is
    measured in `slow_norm` (the slow pivot), w in L². Degenerate pairs are skipped.
    """
    x1, x2, y, w = as_values(x1), as_values(x2), as_values(y), as_values(w)
    slow_norm = slow_norm or L2Pivot(drift.grid)
    C = drift.h3_constant(slow_norm.name) if C is None else C
    fast_pivot = L2Pivot(drift.grid)
    denominator = float(slow_norm.norm(x1 - x2) * fast_pivot.norm(w))
    if denominator < SKIP_BELOW:
        return CheckReport("h3", 0.0, ok=True, skipped=True)
    ratio = float(fast_pivot.inner(drift(x1, y) - drift(x2, y), w)) / denominator
    value = ratio - C
    tolerance = RELATIVE_TOL * max(1.0, C)
    return CheckReport("h3", value, {"ratio": ratio, "C": -C}, ok=value <= tolerance, tolerance=tolerance)


def check_growth_A3(
    op: SlowOperator, g1: SlowNoise, u: Vector, C: Optional[float] = None, beta1: Optional[float] = None
) -> CheckReport:
    """
    ‖A(u)‖_{V*}^{γ₁/(γ₁−1)} − C(1+‖u‖_V^γ₁)(1+‖u‖_H^β₁), with the dual norm taken over
    sine directions.
    """
    u = as_values(u)
    declared = op.constants(g1)
    C = declared.growth_C if C is None else C
    beta1 = declared.growth_beta1 if beta1 is None else beta1
    gamma = op.gamma1
    dual = _dual_norm(op(u), op.pivot, op.v_norm)
    bound = C * (1 + op.v_norm(u) ** gamma) * (1 + op.pivot.norm(u) ** beta1)
    return _report("A3", {"dual": dual ** (gamma / (gamma - 1)), "bound": -bound})


def check_growth_H4(
    drift: FastDrift, x: Vector, y: Vector, C: Optional[float] = None, beta2: Optional[float] = None
) -> CheckReport:
    """‖F₂(x,y)‖²_{V₂*} − C(1+‖y‖_V²)(1+‖y‖^β₂) − C‖x‖²."""
    x, y = as_values(x), as_values(y)
    declared_C, declared_beta2 = drift.growth_constants()
    C = declared_C if C is None else C
    beta2 = declared_beta2 if beta2 is None else beta2
    pivot = L2Pivot(drift.grid)
    dual = _dual_norm(drift(x, y), pivot, drift.v_norm)
    bound = C * (1 + drift.v_norm(y) ** 2) * (1 + pivot.norm(y) ** beta2) + C * pivot.inner(x, x)
    return _report("H4", {"dual": dual**2, "bound": -bound})


def check_coupling_lipschitz(
    coupling: CouplingF1,
    u1: Vector,
    v1: Vector,
    u2: Vector,
    v2: Vector,
    pivot: Optional[Pivot] = None,
    C: Optional[float] = None,
) -> CheckReport:
    """
    ‖F₁(u₁,v₁) − F₁(u₂,v₂)‖_H / (‖u₁−u₂‖_H + ‖v₁−v₂‖)
    against the declared constant.
    In the H⁻¹ pivot the fast part loses at most a factor 1/√λ₁.
    """
    u1, v1, u2, v2 = (as_values(a) for a in (u1, v1, u2, v2))
    # the L² ratio does not depend on the spacing, so a unit grid is enough without a pivot
    pivot = pivot or L2Pivot(Grid(u1.shape[-1]))
    grid = pivot.grid
    if C is None:
        embedding = 1.0 if pivot.name == "l2" else max(1.0, 1 / np.sqrt(grid.basis.lambda1))
        C = coupling.lipschitz * embedding
    fast_pivot = L2Pivot(grid)
    denominator = float(pivot.norm(u1 - u2) + fast_pivot.norm(v1 - v2))
    if denominator < SKIP_BELOW:
        return CheckReport("F1_lipschitz", 0.0, ok=True, skipped=True)
    ratio = float(pivot.norm(coupling(u1, v1) - coupling(u2, v2))) / denominator
    value = ratio - C
    tolerance = RELATIVE_TOL * max(1.0, C)
    return CheckReport("F1_lipschitz", value, {"ratio": ratio, "C": -C}, ok=value <= tolerance, tolerance=tolerance)


def random_state(grid: Grid, rng: np.random.Generator, radius: float = 10.0, decay: float = 1.0) -> np.ndarray:
    """Random grid state with sine coefficients N(0,1)/k^decay, rescaled to an L² norm uniform in [0, radius]."""
    k = np.arange(1, grid.n_interior + 1)
    coefficients = rng.standard_normal(grid.n_interior) / k**decay
    values = grid.basis.synthesize(coefficients)
    norm = np.sqrt(grid.h * np.sum(values**2))
    if norm == 0:
        return values
    return values * (rng.uniform(0, radius) / norm)


@dataclass
class SuiteReport:
    name: str
    n_samples: int = 0
    n_violations: int = 0
    n_skipped: int = 0
    max_value: float = -np.inf
    worst: Optional[CheckReport] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.n_violations == 0

    def add(self, report: CheckReport):
        if report.skipped:
            self.n_skipped += 1
            return
        self.n_samples += 1
        if not report.ok:
            self.n_violations += 1
        if report.value > self.max_value:
            self.max_value = report.value
            self.worst = report


def run_condition_suite(model: ModelSpec, n_pairs: int = 500, radius: float = 10.0, seed: int = 0) -> List[SuiteReport]:
    """
    Evaluates every applicable hypothesis checker of `model` on `n_pairs` random
    states with ‖u‖ ≤ radius and collects the violations per checker.
    """
    grid, slow, fast, g1 = model.grid, model.slow, model.fast, model.noise.g1
    rng = SeedSpec(seed).stream(0, "check")
    suites: Dict[str, SuiteReport] = {}

    def record(report: CheckReport):
        suites.setdefault(report.name, SuiteReport(report.name)).add(report)

    for _ in range(n_pairs):
        u, v, x, y1, y2, w = (random_state(grid, rng, radius) for _ in range(6))
        record(check_hypothesis_A2(slow, g1, u, v))
        if slow.uses_a4:
            record(check_coercivity_A4(slow, g1, u))
        record(check_growth_A3(slow, g1, u))
        record(check_hypothesis_H2_H3(fast, x, y1, y2))
        record(check_h3_lipschitz_in_x(fast, u, v, y1, w, slow_norm=model.pivot))
        record(check_growth_H4(fast, x, y1))
        record(check_coupling_lipschitz(model.coupling, u, y1, v, y2, pivot=model.pivot))

    results = list(suites.values())
    for suite in results:
        if suite.ok:
            logger.info(f"{model.name}: {suite.name} holds on {suite.n_samples} samples (max {suite.max_value:.3e}).")
        else:
            logger.warning(
                f"{model.name}: {suite.name} violated on {suite.n_violations}/{suite.n_samples} samples "
                f"(max {suite.max_value:.3e})."
            )
    return results
