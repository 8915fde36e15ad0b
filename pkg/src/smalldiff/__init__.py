"""Staged estimation and hypothesis tests for small-noise diffusions
observed at discrete times, with a Monte Carlo study harness."""

from .models import ModelSpec, make_builtin, register_model, available_models, validate_model
from .paths import (ObservationSet, OdePath, solve_ode, simulate_sde,
                    save_observations, load_observations)
from .generator import GeneratorTerms, iterated_drift, drift_correction, step_residuals
from .contrasts import ContrastContext, ContrastError
from .optimizer import OptimOptions, OptimResult, minimize_box, multi_start
from .estimators import (Estimate, approximation_degree, estimate_type1, estimate_type2,
                         estimate_lowrho, estimate_special, estimate_auto,
                         joint_baseline, multistart_init, global_init, SharedRegimeError)
from .asymptotics import (InfoMatrices, info_matrices, asymptotic_cov, theoretical_sd,
                          limit_contrasts, null_optimal_params)
from .testing import (Hypothesis, TestOutcome, TestReport, chi2_quantile, chi2_pvalue,
                      restriction_block, mc_null_quantile, restricted_estimate,
                      lr_statistic, run_test, four_way_case, make_null_spec)
from .montecarlo import (ExperimentConfig, ExperimentSummary, run_experiment,
                         write_summary, emit_plot_data, normality_diagnostics)

__version__ = "0.1.0"
