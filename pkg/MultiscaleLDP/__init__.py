from .Space import Grid, GridFunction, SpectralBasis, Path, L2Pivot, HMinus1Pivot, W1pNorm, LpNorm
from .Space import path_metric, energy_functional
from .Space import Functional, ModeCoefficient, NodeValue, MeanValue, QuadraticCost, GridMismatchError
from .Models import ModelSpec, ModelSpecError, NonFiniteOperatorError, SlowConstants
from .Models import LinearOperator, PorousMedia, FastDiffusion, PLaplace, Burgers
from .Models import LinearCoupling, BoundedLipschitzCoupling, LinearOU, ReactionDiffusion
from .Models import ConstantDiagonalNoise, StateLipschitzNoise, FastNoise, NoiseMaps
from .Conditions import CheckReport, SuiteReport, check_hypothesis_A2, check_coercivity_A4, check_hypothesis_H2_H3
from .Conditions import check_h3_lipschitz_in_x, check_growth_A3, check_growth_H4, check_coupling_lipschitz
from .Conditions import run_condition_suite
from .Noise import NoiseTruncation, ControlPath, SeedSpec, control_energy, project_to_ball, wiener_increments
from .Simulate import ScaleParams, StoppingSpec, Trajectory, Ensemble, IntegrationError
from .Simulate import step_slow_fast, run_trajectory, run_ensemble, run_auxiliary
from .Simulate import time_increment_statistic, auxiliary_difference
from .Averaging import AveragedDrift, AveragingToleranceError, ErgodicFit, FrozenRun
from .Averaging import solve_frozen, frozen_time_average, measure_ergodic_rate, averaged_drift, empirical_lipschitz
from .Skeleton import SkeletonProblem, SkeletonBlowUpError, solve_skeleton, solve_forward_map
from .Rate import RateProblem, RateSettings, RateResult, TerminalSet, FullPath, TerminalCost, CompactnessReport
from .Rate import objective_and_gradient, minimize_rate, level_set_sample, lq_closed_form, lq_laplace_value
from .Config import ExperimentConfig, ConfigError, load_config
from .Harness import ConvergenceTable, ProbabilityEstimate, LdpFitReport, LevelScan, LaplaceReport
from .Harness import weak_convergence_experiment, estimate_event_probability, ldp_scaling_fit
from .Harness import level_probability_scan, laplace_principle_experiment
from .CLI import run_experiment_cli
from .Recipes import Recipe, RecipeOutcome, RecipeNotFoundError, list_recipes, run_recipe
