"""Simulation lab for cohort stepped-wedge cluster randomized trials.

Builds stepped-wedge layouts, generates closed/open cohort outcome data,
fits linear mixed models by REML, computes model-based and cluster-robust
(CR0/CR2/CR3) variance estimates with Satterthwaite degrees of freedom,
and aggregates Monte Carlo performance measures.
"""

from swcrt.design import TrialDesign, build_design, randomize_arms
from swcrt.datagen import (
    Dataset,
    SimParams,
    generate_closed,
    generate_open,
    nonlinear_coefficient,
    scenario_params,
)
from swcrt.lmm import (
    FitOptions,
    FitResult,
    ModelMatrices,
    ModelVariant,
    DfUnavailableError,
    build_matrices,
    fit_reml,
    reml_objective,
    satterthwaite_df_model,
)
from swcrt.robust import (
    EstimatorFailure,
    RobustVcov,
    TestResult,
    VarianceEstimator,
    cr_vcov,
    satterthwaite_df_cr,
    wald_test,
)
from swcrt.mc import (
    ScenarioConfig,
    ScenarioSummary,
    aggregate,
    binomial_band,
    run_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "TrialDesign",
    "build_design",
    "randomize_arms",
    "Dataset",
    "SimParams",
    "generate_closed",
    "generate_open",
    "nonlinear_coefficient",
    "scenario_params",
    "FitOptions",
    "FitResult",
    "ModelMatrices",
    "ModelVariant",
    "DfUnavailableError",
    "build_matrices",
    "fit_reml",
    "reml_objective",
    "satterthwaite_df_model",
    "EstimatorFailure",
    "RobustVcov",
    "TestResult",
    "VarianceEstimator",
    "cr_vcov",
    "satterthwaite_df_cr",
    "wald_test",
    "ScenarioConfig",
    "ScenarioSummary",
    "aggregate",
    "binomial_band",
    "run_scenario",
]
