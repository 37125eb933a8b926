"""Structured Koopman lifting for time-scale-separated controlled systems.

Learn lifted linear (Koopman) models with explicit slow/fast/actuator
structure from simulation data, collapse the fast scales into closed-form
slow-scale limit models, analyze cross-scale stability through pseudospectral
transient-growth measures, and solve box-constrained optimal control problems
on the lifted dynamics.
"""

from .benchmark import (DivergenceError, ScaleState, SystemConfig, TimeGrid,
                        Trajectory, fast_equilibrium_state, integrate,
                        integrate_batch, rhs)
from .costs import CostQuadratic, benchmark_running_cost, lqr_tracking_cost
from .lifting import LiftingMap
from .lqr import (LqrPolicy, LqrSolveError, bellman_residuals, psd_pinv,
                  solve_bellman)
from .models import (KoopmanBlocks, LimitModel, RolloutDivergenceError,
                     UnstableFastError, collapse_cost, spectral_radius)
from .ocp import (OcpSolution, OcpSpec, PolicyStudyResult, best_constant_policy,
                  evaluate_policy, realized_costs_hier_batch, run_policy_study,
                  solve_box_qp, solve_ocp)
from .stability import (GridConfig, StabilityReport, analyze, format_table,
                        kreiss_lower_bound, complex_stability_radius,
                        max_initial_growth, stability_table, table_to_csv)
from .training import (Dataset, TrainConfig, TrainResult,
                       benchmark_train_config, generate_dataset,
                       prediction_rms_table, save_dataset, save_history, train)

__version__ = "0.1.0"

__all__ = [
    "CostQuadratic", "Dataset", "DivergenceError", "GridConfig",
    "KoopmanBlocks", "LiftingMap", "LimitModel", "LqrPolicy", "LqrSolveError",
    "OcpSolution", "OcpSpec", "PolicyStudyResult", "RolloutDivergenceError",
    "ScaleState", "StabilityReport", "SystemConfig", "TimeGrid", "TrainConfig",
    "TrainResult", "Trajectory", "UnstableFastError", "analyze",
    "bellman_residuals", "benchmark_running_cost", "benchmark_train_config",
    "best_constant_policy", "collapse_cost", "complex_stability_radius",
    "evaluate_policy", "fast_equilibrium_state", "format_table",
    "generate_dataset", "integrate", "integrate_batch", "kreiss_lower_bound",
    "lqr_tracking_cost", "max_initial_growth", "prediction_rms_table",
    "psd_pinv", "realized_costs_hier_batch", "rhs", "run_policy_study",
    "save_dataset", "save_history", "solve_bellman", "solve_box_qp",
    "solve_ocp", "spectral_radius", "stability_table", "table_to_csv", "train",
]
