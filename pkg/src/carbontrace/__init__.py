"""Locational carbon emission signals and carbon-aware DC optimal power flow."""

__version__ = "0.1.0"

from .dispatch import (
    CarbonOpfConfig,
    DispatchResult,
    InfeasibleDispatchError,
    NumericFailureError,
    build_baseline_opf,
    build_carbon_opf,
    solve_baseline,
    solve_carbon_opf,
)
from .flow import PtdfMatrix, compute_ptdf, dc_power_flow, line_flows
from .grid import LBS_PER_TON, Network, load_builtin, load_case, parse_case, validate_network
from .qp import QuadraticProgram, Solution, check_kkt, solve_qp
from .sampler import Dataset, LoadScenario, generate_dataset, sample_loads, split
from .tracing import (
    CarbonReport,
    DistributionFactorRegressor,
    FactorMatrix,
    RankDeficientError,
    ance,
    carbon_report,
    fit_distribution_factors,
    lmce,
    lmce_sensitivity_oracle,
    nodal_emissions,
    reconstruct_loads,
)

__all__ = [
    "CarbonOpfConfig", "CarbonReport", "Dataset", "DispatchResult", "DistributionFactorRegressor",
    "FactorMatrix", "InfeasibleDispatchError", "LBS_PER_TON", "LoadScenario", "Network",
    "NumericFailureError", "PtdfMatrix", "QuadraticProgram", "RankDeficientError", "Solution",
    "ance", "build_baseline_opf", "build_carbon_opf", "carbon_report", "check_kkt", "compute_ptdf",
    "dc_power_flow", "fit_distribution_factors", "generate_dataset", "line_flows", "lmce",
    "lmce_sensitivity_oracle", "load_builtin", "load_case", "nodal_emissions", "parse_case",
    "reconstruct_loads", "sample_loads", "solve_baseline", "solve_carbon_opf", "solve_qp",
    "split", "validate_network",
]
