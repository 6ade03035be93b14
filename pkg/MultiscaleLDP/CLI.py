import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import polars as pl

from . import Harness
from .Config import ConfigError, ExperimentConfig, load_config
from .Noise import ControlPath, SeedSpec
from .Output import RunOutput
from .Simulate import run_ensemble, run_trajectory
from .Skeleton import solve_skeleton
from .Space import Path as StatePath

logger = logging.getLogger(__name__)

__all__ = ["UsageError", "build_parser", "run_experiment_cli", "main"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FINDINGS = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _path_frame(path: StatePath, config: ExperimentConfig) -> pl.DataFrame:
    model = config.model
    data = {"t": path.times, "x_h": model.pivot.norm(path.values), "x_v": model.v_norm(path.values)}
    for i in range(model.grid.n_interior):
        data[f"x_{i + 1}"] = path.values[:, i]
    return pl.DataFrame(data)


def _simulate(config: ExperimentConfig, args, out: RunOutput):
    scales = config.scales.points()[0]
    phi = config.control_path() if config.control.kind != "zero" else None
    trajectory = run_trajectory(
        config.model, scales, config.x0, config.y0, phi, config.ensemble.stopping, SeedSpec(config.seed).stream(0)
    )
    out.write_csv("trajectory.csv", trajectory.to_frame(config.model, fields=True))
    if config.ensemble.n_paths > 1:
        ensemble = run_ensemble(
            config.model,
            scales,
            config.x0,
            config.y0,
            phi,
            n_paths=config.ensemble.n_paths,
            seed=config.seed,
            stopping=config.ensemble.stopping,
            threads=config.ensemble.threads,
            chunk_size=config.ensemble.chunk_size,
            progress=args.progress,
        )
        out.write_csv("ensemble.csv", ensemble.summary_frame())
        if ensemble.failed.any():
            out.add_findings([f"{int(ensemble.failed.sum())} trajectories left the 1e6 ball"])
    if trajectory.failed:
        out.add_findings(["trajectory 0 left the 1e6 ball"])


def _average_drift(config: ExperimentConfig, args, out: RunOutput):
    drift, ergodic = Harness.averaged_drift_table(config)
    out.write_csv("averaged_drift.csv", drift)
    if ergodic is not None:
        out.write_csv("ergodic.csv", ergodic)
        out.add_findings([f for f in ergodic["finding"].to_list() if f])


def _skeleton(config: ExperimentConfig, args, out: RunOutput):
    phi = ControlPath.from_csv(args.phi) if args.phi else config.control_path()
    path = solve_skeleton(config.skeleton_problem(phi))
    out.write_csv("skeleton.csv", _path_frame(path, config))
    out.write_csv("control.csv", phi.to_frame())


def _rate(config: ExperimentConfig, args, out: RunOutput):
    result = Harness.reference_rate(config)
    out.write_csv(
        "rate.csv",
        pl.DataFrame(
            {
                "I": [result.I_value],
                "residual": [result.residual],
                "feasible": [result.feasible],
                "objective": [result.objective],
                "iterations": [result.iterations],
                "penalty_weight": [result.penalty_weight],
            }
        ),
    )
    out.write_csv("phi_star.csv", result.phi_star.to_frame())
    if result.trace:
        out.write_csv("rate_trace.csv", pl.DataFrame(result.trace))
    if not result.feasible:
        out.add_findings([f"target not reached (residual {result.residual:.3e})"])


def _validate_ldp(config: ExperimentConfig, args, out: RunOutput):
    report = Harness.ldp_scaling_fit(config, progress=args.progress)
    out.write_csv("probabilities.csv", report.probabilities_frame())
    out.write_csv("ldp_fit.csv", report.fit_frame())
    if report.phi_star is not None:
        out.write_csv("phi_star.csv", report.phi_star.to_frame())
    out.add_findings(report.findings)
    if config.event.levels:
        scan = Harness.level_probability_scan(config, progress=args.progress)
        out.write_csv("level_scan.csv", scan.to_frame())
        out.add_findings(scan.findings)


def _weak_convergence(config: ExperimentConfig, args, out: RunOutput):
    table = Harness.weak_convergence_experiment(config, progress=args.progress)
    out.write_csv("convergence.csv", table.to_frame())
    out.add_findings(table.findings)


def _check_conditions(config: ExperimentConfig, args, out: RunOutput):
    suites = Harness.check_conditions(config)
    out.write_csv("conditions.csv", Harness.conditions_frame(suites))
    out.add_findings(
        [f"{s.name} violated on {s.n_violations}/{s.n_samples} samples" for s in suites if not s.ok]
    )


def _validate_laplace(config: ExperimentConfig, args, out: RunOutput):
    report = Harness.laplace_principle_experiment(config, progress=args.progress)
    out.write_csv("laplace.csv", report.to_frame())
    out.add_findings(report.findings)


def _compactness(config: ExperimentConfig, args, out: RunOutput):
    reports = Harness.compactness_study(config)
    out.write_csv("compactness.csv", Harness.compactness_frame(reports))
    for r in reports:
        out.add_findings([f"M={r.M:g}: {f}" for f in r.findings])


SUBCOMMANDS: Dict[str, Callable] = {
    "simulate": _simulate,
    "average-drift": _average_drift,
    "skeleton": _skeleton,
    "rate": _rate,
    "validate-ldp": _validate_ldp,
    "weak-convergence": _weak_convergence,
    "check-conditions": _check_conditions,
    "validate-laplace": _validate_laplace,
    "compactness": _compactness,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="multiscale-ldp", description="Slow-fast SPDE large deviation experiments.")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=True, help="Experiment YAML file.")
        p.add_argument("--seed", type=int, default=None, help="Override the config seed.")
        p.add_argument("--out", type=Path, default=None, help="Output directory (overrides output.dir).")
        p.add_argument("--threads", type=int, default=None, help="Ensemble worker threads.")
        verbosity = p.add_mutually_exclusive_group()
        verbosity.add_argument("-v", "--verbose", action="store_true")
        verbosity.add_argument("-q", "--quiet", action="store_true")
        if name == "skeleton":
            p.add_argument("--phi", type=Path, default=None, help="Control CSV (t, c_1..c_K).")
    return parser


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError(f"--seed must be nonnegative, got {args.seed}.")
        config.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError(f"--threads must be positive, got {args.threads}.")
        config.ensemble.threads = args.threads
    if args.out is not None:
        config.output_dir = args.out
    return config


def run_experiment_cli(argv: Optional[List[str]] = None) -> int:
    """
    Runs one subcommand. Returns 0 on success, 2 when the run produced findings
    and 1 on any error (usage and config errors included).
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as e:
        return int(e.code or 0)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    args.progress = not args.quiet

    try:
        config = _apply_overrides(load_config(args.config), args)
        out = RunOutput(config.output_dir, args.subcommand)
        SUBCOMMANDS[args.subcommand](config, args, out)
        out.finish(config.source, config.seed)
    except (ConfigError, UsageError) as e:
        print(e, file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:
        logger.debug("Run failed.", exc_info=True)
        print(f"{args.subcommand}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR

    if out.findings:
        for finding in out.findings:
            logger.warning(f"Finding: {finding}.")
        return EXIT_FINDINGS
    return EXIT_OK


def main():
    sys.exit(run_experiment_cli(sys.argv[1:]))
