def test_space_imports():
    from MultiscaleLDP import Grid, GridFunction, SpectralBasis, Path, L2Pivot, HMinus1Pivot, path_metric


def test_model_imports():
    from MultiscaleLDP import ModelSpec, LinearOperator, PorousMedia, FastDiffusion, PLaplace, Burgers
    from MultiscaleLDP import LinearCoupling, BoundedLipschitzCoupling, LinearOU, ReactionDiffusion


def test_condition_imports():
    from MultiscaleLDP import check_hypothesis_A2, check_coercivity_A4, check_hypothesis_H2_H3, run_condition_suite


def test_simulation_imports():
    from MultiscaleLDP import ScaleParams, StoppingSpec, SeedSpec, ControlPath, run_trajectory, run_ensemble


def test_averaging_imports():
    from MultiscaleLDP import AveragedDrift, solve_frozen, measure_ergodic_rate


def test_rate_imports():
    from MultiscaleLDP import SkeletonProblem, solve_skeleton, RateProblem, minimize_rate, level_set_sample


def test_harness_imports():
    from MultiscaleLDP import ExperimentConfig, load_config, ldp_scaling_fit, laplace_principle_experiment
    from MultiscaleLDP import run_experiment_cli, list_recipes, run_recipe
