from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .Averaging import AveragedDrift
from .Models import ModelSpec, ModelSpecError
from .Noise import ControlPath
from .Rate import RateSettings
from .Simulate import ScaleParams, StoppingSpec
from .Skeleton import SkeletonProblem
from .Space import Functional, Grid, MeanValue, ModeCoefficient, NodeValue

__all__ = [
    "ConfigError",
    "ScaleGrid",
    "EventSpec",
    "ControlSpec",
    "EnsembleSpec",
    "AveragingSpec",
    "ExperimentConfig",
    "load_config",
]

TOP_LEVEL_KEYS = (
    "name",
    "recipe",
    "grid",
    "slow",
    "coupling",
    "fast",
    "noise",
    "initial",
    "scales",
    "averaging",
    "event",
    "control",
    "rate",
    "ensemble",
    "skeleton",
    "compactness",
    "checks",
    "seed",
    "output",
)


class ConfigError(ValueError):
    def __init__(self, message: str, path: Tuple[Union[str, int], ...] = (), line: Optional[int] = None, file=None):
        self.message = message
        self.path = tuple(path)
        self.line = line
        self.file = file
        super().__init__(str(self))

    def __str__(self):
        where = ".".join(str(p) for p in self.path)
        message = f"{where}: {self.message}" if where else self.message
        if self.file is not None and self.line is not None:
            return f"{self.file}:{self.line}: {message}"
        return message


def _section(d: Dict[str, Any], key: str, allowed: Sequence[str], path: Tuple = ()) -> Dict[str, Any]:
    section = d.get(key, {})
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"expected a mapping, got {type(section).__name__}.", path + (key,))
    for k in section:
        if k not in allowed:
            raise ConfigError(f"unknown key '{k}' (allowed: {', '.join(allowed)}).", path + (key, k))
    return section


def _number(section: Dict[str, Any], key: str, default, path: Tuple, minimum: Optional[float] = None, integer=False):
    value = section.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}.", path + (key,))
    if integer and int(value) != value:
        raise ConfigError(f"expected an integer, got {value!r}.", path + (key,))
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}.", path + (key,))
    return int(value) if integer else float(value)


def _numbers(values, path: Tuple) -> List[float]:
    """A scalar or a list of numbers; a bad entry is reported at its own index."""
    if not isinstance(values, list):
        values = [values]
    out = []
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"expected a number, got {v!r}.", path + (i,))
        out.append(float(v))
    return out


def _functional(spec: Dict[str, Any], grid: Grid, path: Tuple) -> Functional:
    if not isinstance(spec, dict):
        raise ConfigError("functional must be a mapping with a 'kind'.", path)
    kind = spec.get("kind", "mode")
    for k in spec:
        if k not in ("kind", "mode", "node"):
            raise ConfigError(f"unknown key '{k}'.", path + (k,))
    try:
        if kind == "mode":
            return ModeCoefficient(grid, _number(spec, "mode", 1, path, 1, integer=True))
        if kind == "node":
            return NodeValue(grid, _number(spec, "node", grid.n_interior // 2, path, 0, integer=True))
        if kind == "mean":
            return MeanValue(grid)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e), path) from e
    raise ConfigError(f"functional kind '{kind}' not found (available: mode, node, mean).", path + ("kind",))


def _initial_state(spec, grid: Grid, path: Tuple) -> np.ndarray:
    if spec is None:
        return np.zeros(grid.n_interior)
    if not isinstance(spec, dict):
        raise ConfigError("initial state must be a mapping with a 'kind'.", path)
    kind = spec.get("kind", "zero")
    for k in spec:
        if k not in ("kind", "mode", "amplitude", "values"):
            raise ConfigError(f"unknown key '{k}'.", path + (k,))
    if kind == "zero":
        return np.zeros(grid.n_interior)
    if kind == "sine":
        mode = _number(spec, "mode", 1, path, 1, integer=True)
        if mode > grid.n_interior:
            raise ConfigError(f"mode {mode} exceeds n_interior {grid.n_interior}.", path + ("mode",))
        return grid.sine(mode, _number(spec, "amplitude", 1.0, path)).values.copy()
    if kind == "values":
        values = np.asarray(spec.get("values", []), dtype=float)
        if values.shape != (grid.n_interior,) or not np.all(np.isfinite(values)):
            raise ConfigError(f"expected {grid.n_interior} finite values.", path + ("values",))
        return values
    raise ConfigError(f"initial state kind '{kind}' not found (available: zero, sine, values).", path + ("kind",))


@dataclass
class ScaleGrid:
    """(ε, α) points, decreasing in ε; α = ε^alpha_exponent unless alphas are given."""

    epsilons: List[float]
    alphas: List[float]
    T: float = 1.0
    dt_factor: float = 20.0

    def points(self) -> List[ScaleParams]:
        return [ScaleParams(e, a, T=self.T, dt_factor=self.dt_factor) for e, a in zip(self.epsilons, self.alphas)]

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ScaleGrid":
        path = ("scales",)
        s = _section(d, "scales", ("T", "epsilons", "alpha_exponent", "alphas", "dt_factor"))
        epsilons = s.get("epsilons", [0.2, 0.1, 0.05])
        if not isinstance(epsilons, list) or not epsilons:
            raise ConfigError("epsilons must be a nonempty list.", path + ("epsilons",))
        epsilons = _numbers(epsilons, path + ("epsilons",))
        if any(not 0 < e <= 1 for e in epsilons):
            raise ConfigError("every epsilon must lie in (0, 1].", path + ("epsilons",))
        if any(b >= a for a, b in zip(epsilons, epsilons[1:])):
            raise ConfigError("epsilons must be strictly decreasing.", path + ("epsilons",))
        if "alphas" in s:
            alphas = _numbers(s["alphas"], path + ("alphas",))
            if len(alphas) != len(epsilons):
                raise ConfigError("alphas and epsilons differ in length.", path + ("alphas",))
        else:
            exponent = _number(s, "alpha_exponent", 1.5, path, 1.0)
            alphas = [e**exponent for e in epsilons]
        for i, (e, a) in enumerate(zip(epsilons, alphas)):
            if not 0 < a <= e:
                raise ConfigError(f"alpha = {a:.4g} must lie in (0, epsilon = {e:.4g}].", path + ("alphas", i))
        grid = cls(epsilons, alphas, _number(s, "T", 1.0, path, 0.0), _number(s, "dt_factor", 20.0, path, 20.0))
        try:
            grid.points()
        except ValueError as e:
            raise ConfigError(str(e), path) from e
        return grid


@dataclass
class EventSpec:
    """Terminal event g(X_T) ≥ level, the level scan and the Laplace cost weight β."""

    functional: Functional = field(repr=False)
    level: float = 1.0
    levels: List[float] = field(default_factory=list)
    sampler: str = "girsanov"
    beta: float = 1.0

    @classmethod
    def from_dict(cls, d: Dict[str, Any], grid: Grid) -> "EventSpec":
        path = ("event",)
        s = _section(d, "event", ("functional", "level", "levels", "sampler", "beta"))
        functional = _functional(s.get("functional", {"kind": "mode", "mode": 1}), grid, path + ("functional",))
        level = _number(s, "level", 1.0, path)
        sampler = s.get("sampler", "girsanov")
        if sampler not in ("naive", "girsanov"):
            raise ConfigError(f"sampler '{sampler}' not found (available: naive, girsanov).", path + ("sampler",))
        levels = _numbers(s.get("levels", []), path + ("levels",))
        return cls(functional, float(level), levels, sampler, _number(s, "beta", 1.0, path, 0.0))


@dataclass
class ControlSpec:
    n_segments: int = 20
    kind: str = "zero"
    value: List[float] = field(default_factory=list)
    file: Optional[Path] = None

    @classmethod
    def from_dict(cls, d: Dict[str, Any], base: Optional[Path]) -> "ControlSpec":
        path = ("control",)
        s = _section(d, "control", ("n_segments", "kind", "value", "file"))
        kind = s.get("kind", "zero")
        if kind not in ("zero", "constant", "file"):
            raise ConfigError(f"control kind '{kind}' not found (available: zero, constant, file).", path + ("kind",))
        value = s.get("value", [])
        value = _numbers(value, path + ("value",))
        file = s.get("file")
        if kind == "file":
            if file is None:
                raise ConfigError("a file control needs 'file'.", path)
            file = Path(file) if base is None or Path(file).is_absolute() else base / file
        return cls(_number(s, "n_segments", 20, path, 1, integer=True), kind, value, file)


@dataclass
class EnsembleSpec:
    n_paths: int = 1000
    threads: int = 1
    chunk_size: int = 256
    stopping: StoppingSpec = field(default_factory=StoppingSpec)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "EnsembleSpec":
        path = ("ensemble",)
        s = _section(d, "ensemble", ("n_paths", "threads", "chunk_size", "stopping"))
        stop = _section(s, "stopping", ("N", "mode"), path)
        N = stop.get("N", np.inf)
        N = np.inf if N in ("inf", ".inf", None) else N
        try:
            stopping = StoppingSpec(float(N), stop.get("mode", "tau"))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e), path + ("stopping",)) from e
        return cls(
            _number(s, "n_paths", 1000, path, 1, integer=True),
            _number(s, "threads", 1, path, 1, integer=True),
            _number(s, "chunk_size", 256, path, 1, integer=True),
            stopping,
        )


@dataclass
class AveragingSpec:
    backend: str = "analytic"
    burn_in: Optional[float] = None
    sample_horizon: Optional[float] = None
    n_replicas: int = 16
    tolerance: Optional[float] = None
    n_samples: int = 0
    ergodic_starts: List[float] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "AveragingSpec":
        path = ("averaging",)
        keys = ("backend", "burn_in", "sample_horizon", "n_replicas", "tolerance", "n_samples", "ergodic_starts")
        s = _section(d, "averaging", keys)
        backend = s.get("backend", "analytic")
        if backend not in ("analytic", "ergodic_mc"):
            raise ConfigError(f"backend '{backend}' not found (available: analytic, ergodic_mc).", path + ("backend",))
        optional = {
            k: (_number(s, k, None, path, 0.0) if k in s else None) for k in ("burn_in", "sample_horizon", "tolerance")
        }
        return cls(
            backend,
            n_replicas=_number(s, "n_replicas", 16, path, 1, integer=True),
            n_samples=_number(s, "n_samples", 0, path, 0, integer=True),
            ergodic_starts=_numbers(s.get("ergodic_starts", []), path + ("ergodic_starts",)),
            **optional,
        )


@dataclass
class ExperimentConfig:
    """
    One experiment: the model, scales, event, control, optimizer, ensemble and
    output settings read from a YAML file.
    """

    name: str
    model: ModelSpec = field(repr=False)
    x0: np.ndarray = field(repr=False)
    y0: np.ndarray = field(repr=False)
    scales: ScaleGrid = field(repr=False)
    averaging: AveragingSpec = field(repr=False)
    event: EventSpec = field(repr=False)
    control: ControlSpec = field(repr=False)
    rate: RateSettings = field(repr=False)
    rate_dt: float = 1e-3
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec, repr=False)
    skeleton_dt: float = 1e-3
    record_every: int = 1
    compactness_M: List[float] = field(default_factory=lambda: [1.0, 4.0])
    compactness_samples: int = 50
    compactness_C: Optional[float] = None
    check_pairs: int = 500
    check_radius: float = 10.0
    seed: int = 0
    output_dir: Path = Path("results")
    source: bytes = field(default=b"", repr=False)
    source_path: Optional[Path] = None

    @classmethod
    def from_dict(cls, d: Dict[str, Any], base: Optional[Path] = None, source: bytes = b"") -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("top level must be a mapping.")
        for key in d:
            if key not in TOP_LEVEL_KEYS:
                raise ConfigError(f"unknown section '{key}'.", (key,))
        name = str(d.get("name", "experiment"))
        try:
            sections = {k: d[k] for k in ("grid", "slow", "coupling", "fast", "noise") if k in d}
            model = ModelSpec.from_dict(sections, name)
        except ModelSpecError as e:
            raise ConfigError(str(e), e.path) from e
        grid = model.grid

        initial = _section(d, "initial", ("x0", "y0"))
        x0 = _initial_state(initial.get("x0"), grid, ("initial", "x0"))
        y0 = _initial_state(initial.get("y0"), grid, ("initial", "y0"))

        rate_keys = ("dt", "max_iter", "grad_tol", "residual_tol", "penalty_w0", "max_doublings", "step_rule")
        r = _section(d, "rate", rate_keys)
        try:
            settings = RateSettings(
                max_iter=_number(r, "max_iter", 500, ("rate",), 1, integer=True),
                grad_tol=_number(r, "grad_tol", 1e-6, ("rate",), 0.0),
                residual_tol=_number(r, "residual_tol", 1e-4, ("rate",), 0.0),
                penalty_w0=_number(r, "penalty_w0", 1e3, ("rate",), 0.0),
                max_doublings=_number(r, "max_doublings", 12, ("rate",), 0, integer=True),
                step_rule=r.get("step_rule", "bb"),
            )
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e), ("rate", "step_rule")) from e

        sk = _section(d, "skeleton", ("dt", "record_every"))
        cp = _section(d, "compactness", ("M", "n_samples", "C"))
        ch = _section(d, "checks", ("n_pairs", "radius"))
        out = _section(d, "output", ("dir",))
        seed = d.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}.", ("seed",))
        M = cp.get("M", [1.0, 4.0])
        return cls(
            name=name,
            model=model,
            x0=x0,
            y0=y0,
            scales=ScaleGrid.from_dict(d),
            averaging=AveragingSpec.from_dict(d),
            event=EventSpec.from_dict(d, grid),
            control=ControlSpec.from_dict(d, base),
            rate=settings,
            rate_dt=_number(r, "dt", 1e-3, ("rate",), 0.0),
            ensemble=EnsembleSpec.from_dict(d),
            skeleton_dt=_number(sk, "dt", 1e-3, ("skeleton",), 0.0),
            record_every=_number(sk, "record_every", 1, ("skeleton",), 1, integer=True),
            compactness_M=_numbers(M, ("compactness", "M")),
            compactness_samples=_number(cp, "n_samples", 50, ("compactness",), 1, integer=True),
            compactness_C=_number(cp, "C", None, ("compactness",), 0.0) if "C" in cp else None,
            check_pairs=_number(ch, "n_pairs", 500, ("checks",), 1, integer=True),
            check_radius=_number(ch, "radius", 10.0, ("checks",), 0.0),
            seed=seed,
            output_dir=Path(out.get("dir", "results")),
            source=source,
        )

    @property
    def T(self) -> float:
        return self.scales.T

    def drift(self) -> AveragedDrift:
        a = self.averaging
        return AveragedDrift(
            self.model,
            a.backend,
            burn_in=a.burn_in,
            sample_horizon=a.sample_horizon,
            n_replicas=a.n_replicas,
            seed=self.seed,
            tolerance=a.tolerance,
        )

    def control_path(self) -> ControlPath:
        c = self.control
        if c.kind == "file":
            return ControlPath.from_csv(c.file)
        if c.kind == "constant":
            value = np.resize(np.asarray(c.value or [0.0], dtype=float), self.model.n_modes)
            return ControlPath.constant(self.T, c.n_segments, value)
        return ControlPath.zeros(self.T, c.n_segments, self.model.n_modes)

    def skeleton_problem(
        self, phi: Optional[ControlPath] = None, dt: Optional[float] = None, drift: Optional[AveragedDrift] = None
    ) -> SkeletonProblem:
        phi = phi or self.control_path()
        return SkeletonProblem(
            self.model,
            phi,
            self.x0,
            dt=dt or self.skeleton_dt,
            drift=drift or self.drift(),
            record_every=self.record_every,
        )


def _node_line(root: Optional[yaml.Node], path: Tuple) -> Optional[int]:
    """1-based line of the deepest node reachable along path."""
    if root is None:
        return None
    node, line = root, root.start_mark.line + 1
    for key in path:
        if isinstance(node, yaml.MappingNode):
            match = [(k, v) for k, v in node.value if k.value == str(key)]
            if not match:
                break
            k, node = match[0]
            line = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
    return line


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Reads an experiment YAML file; every problem is reported as '<file>:<line>: message'."""
    path = Path(path)
    try:
        source = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}.", file=path, line=0) from e
    try:
        text = source.decode("utf-8")
    except UnicodeDecodeError as e:
        line = source[: e.start].count(b"\n") + 1
        raise ConfigError(f"config is not UTF-8 text: {e.reason} at byte {e.start}.", line=line, file=path) from e
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"invalid YAML: {problem}.", line=line, file=path) from e
    try:
        config = ExperimentConfig.from_dict(data or {}, base=path.parent, source=source)
    except ConfigError as e:
        raise ConfigError(e.message, e.path, _node_line(root, e.path) or 1, path) from e
    config.source_path = path
    return config
