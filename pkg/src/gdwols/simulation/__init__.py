from .generate import (
    SIM_CODING,
    EvalResult,
    LinearLinkError,
    ModelSpec,
    SimConfig,
    SimTruth,
    SimulatedPanel,
    TruncatedNormal,
    allocation_probs,
    conditional_mean,
    evaluate_policy,
    generate_panel,
    model_spec,
    true_optimal,
    truncated_normal_mean,
    truncated_normal_sample,
)
from .montecarlo import PARAMETERS, CellSummary, MonteCarloResult, make_test_panel, run_monte_carlo
from .myopic import MyopicCheck, TwoStageEnv, Witness, myopic_vs_dynamic_check

__all__ = [
    "SIM_CODING", "EvalResult", "LinearLinkError", "ModelSpec", "SimConfig", "SimTruth", "SimulatedPanel",
    "TruncatedNormal", "allocation_probs", "conditional_mean", "evaluate_policy", "generate_panel", "model_spec",
    "true_optimal", "truncated_normal_mean", "truncated_normal_sample", "PARAMETERS", "CellSummary",
    "MonteCarloResult", "make_test_panel", "run_monte_carlo", "MyopicCheck", "TwoStageEnv", "Witness",
    "myopic_vs_dynamic_check",
]
