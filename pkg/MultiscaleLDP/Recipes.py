import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import polars as pl
import yaml

from .CLI import SUBCOMMANDS, run_experiment_cli

logger = logging.getLogger(__name__)

recipe_dir = Path(__file__).parent / "recipes"

__all__ = ["Recipe", "RecipeOutcome", "RecipeNotFoundError", "list_recipes", "load_recipe", "run_recipe"]


class RecipeNotFoundError(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"Recipe '{self.name}' not found (available: {', '.join(list_recipes())})."


@dataclass
class Tolerance:
    """One field of one output CSV with its bound; every row must satisfy it."""

    file: str
    column: str
    max: Optional[float] = None
    min: Optional[float] = None
    equals: Any = None
    approx: Optional[float] = None
    rel: float = 1e-3

    def violations(self, frame: pl.DataFrame) -> List[str]:
        if self.column not in frame.columns:
            return [f"{self.file}: missing column '{self.column}'"]
        failures = []
        for i, value in enumerate(frame[self.column].to_list()):
            where = f"{self.file}[{i}].{self.column} = {value}"
            if self.equals is not None and value != self.equals:
                failures.append(f"{where}, expected {self.equals}")
                continue
            if self.equals is not None:
                continue
            if value is None or (isinstance(value, float) and math.isnan(value)):
                failures.append(f"{where} is missing")
            elif self.max is not None and value > self.max:
                failures.append(f"{where} > {self.max}")
            elif self.min is not None and value < self.min:
                failures.append(f"{where} < {self.min}")
            elif self.approx is not None and abs(value - self.approx) > self.rel * abs(self.approx):
                failures.append(f"{where} differs from {self.approx} by more than {self.rel:.0e} relative")
        return failures


@dataclass
class Recipe:
    name: str
    config: Path
    subcommand: str
    model_doc: str = ""
    expect_exit: int = 0
    tolerances: List[Tolerance] = field(default_factory=list)
    slow: bool = False

    @classmethod
    def from_dict(cls, name: str, config: Path, d: Dict[str, Any]) -> "Recipe":
        subcommand = d.get("subcommand")
        if subcommand not in SUBCOMMANDS:
            raise ValueError(f"Recipe {name}: unsupported subcommand {subcommand}")
        return cls(
            name,
            config,
            subcommand,
            d.get("model_doc", ""),
            int(d.get("expect_exit", 0)),
            [Tolerance(**t) for t in d.get("checks", [])],
            bool(d.get("slow", False)),
        )


@dataclass
class RecipeOutcome:
    name: str
    exit_code: int
    out_dir: Path
    failures: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def list_recipes() -> List[str]:
    return sorted(p.stem for p in recipe_dir.glob("*.yaml"))


def load_recipe(name: str) -> Recipe:
    fn = recipe_dir / f"{name}.yaml"
    if not fn.exists():
        raise RecipeNotFoundError(name)
    with open(fn, "r") as f:
        data = yaml.safe_load(f)
    return Recipe.from_dict(name, fn, data.get("recipe", {}))


def run_recipe(name: str, out_dir: Optional[Path] = None, threads: Optional[int] = None) -> RecipeOutcome:
    """Runs the recipe's CLI pipeline and checks every output field against its tolerance."""
    recipe = load_recipe(name)
    out_dir = Path(out_dir) if out_dir is not None else Path(tempfile.mkdtemp(prefix=f"{name}-"))
    argv = [recipe.subcommand, "--config", str(recipe.config), "--out", str(out_dir), "-q"]
    if threads is not None:
        argv += ["--threads", str(threads)]
    exit_code = run_experiment_cli(argv)
    outcome = RecipeOutcome(name, exit_code, out_dir)
    if exit_code != recipe.expect_exit:
        outcome.failures.append(f"exit code {exit_code}, expected {recipe.expect_exit}")
    for tolerance in recipe.tolerances:
        path = out_dir / tolerance.file
        if not path.exists():
            outcome.failures.append(f"{tolerance.file} was not written")
            continue
        outcome.failures.extend(tolerance.violations(pl.read_csv(path)))
    if outcome.passed:
        logger.info(f"Recipe {name} passed.")
    else:
        logger.warning(f"Recipe {name} failed: {'; '.join(outcome.failures)}.")
    return outcome
