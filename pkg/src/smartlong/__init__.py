"""Longitudinal marginal mean analysis of clustered SMARTs.

Fits weighted estimating equations for three-level outcomes (repeated
measures within individuals within clusters), compares embedded adaptive
interventions through contrast-based Wald inference, and ships a
moment-matched trial simulator for validating operating characteristics.
"""

__version__ = "0.1.0"

from .design import DesignKind, EmbeddedCai, SmartDesign, consistency_indicator, design_weight, enumerate_cais
from .data import (
    ClusterRecord,
    IndividualRecord,
    TableSchema,
    TimeGrid,
    TrialDataset,
    parse_long_table,
    serialize_long_table,
    validate,
)
from .meanmodel import (
    AnchoredKnotBasis,
    ContrastVector,
    CustomBasis,
    MeanModelSpec,
    ThetaEstimate,
    contrast_auc,
    contrast_end_of_study,
    contrast_second_stage_slope,
    custom_contrast,
    design_row,
    make_saturated_basis,
    mu,
    stack_design_matrix,
)
from .workingcov import (
    POOLED,
    AlphaEstimate,
    BetweenCorr,
    CorrCai,
    ResidualGroup,
    ResidualSet,
    VarianceCai,
    VarianceTime,
    WithinCorr,
    WorkingCovSpec,
    build_V,
    estimate_alpha,
    pool_alpha,
)
from .gee import (
    AdjustmentOptions,
    FitOptions,
    FitResult,
    WaldResult,
    WeightMode,
    WeightModel,
    end_of_study_contrast,
    estimate_weight_model,
    finite_sample_adjust,
    fit,
    fit_end_of_study,
    sandwich_covariance,
    sandwich_estimated_weights,
    solve_theta,
    wald_test,
)
