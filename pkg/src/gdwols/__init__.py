"""Generalized dynamic weighted ordinary least squares (G-dWOLS).

Doubly robust estimation of individualized treatment rules for
categorical treatments from longitudinal panel data.
"""
from .bootstrap import BootstrapResult, InferenceOptions, bootstrap_inference
from .data_model import (
    BalanceTable,
    DesignMatrix,
    DesignSpec,
    PanelDataset,
    StageObservation,
    Term,
    TreatmentCoding,
    build_design_matrix,
    smd_table,
)
from .estimation import (
    GdwolsFit,
    RankDeficiencyError,
    blip_contrast,
    confidence_intervals,
    estimate_itr,
    fit_gdwols,
    optimal_treatment,
    sandwich_vcov,
)
from .propensity import (
    ConvergenceError,
    PropensityFit,
    SeparationWarning,
    WeightKind,
    balancing_weight,
    balancing_weights,
    fit_multinomial_logit,
    generalized_propensity,
    verify_balancing,
)
from .staging import (
    CD4Series,
    StageRecord,
    TreatmentStage,
    UtilityWeights,
    build_stage_records,
    fraction_above,
    feasible_actions,
    interpolate_cd4,
    segment_stages,
    stage_utility,
)

__version__ = "0.1.0"
