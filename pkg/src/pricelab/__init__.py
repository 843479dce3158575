"""Panel studies of house-price laws: estimators, inference, and a
collateral-constrained household model.

The package has three layers:

- data handling: :mod:`pricelab.panel` (typed panel datasets, loading,
  deflation, reweighting, border-pair stacking) and :mod:`pricelab.dgp`
  (synthetic panels with exact stored ground truth);
- estimation: :mod:`pricelab.regress` (weighted least squares with absorbed
  fixed effects), :mod:`pricelab.infer` (classical, robust, clustered,
  two-way and spatial variance plans), :mod:`pricelab.did` (static, dynamic
  and triple-difference designs) and :mod:`pricelab.synth` (elastic-net
  synthetic controls with placebo inference);
- theory: :mod:`pricelab.housemodel` (collateral service flows, price
  decompositions and the three-period purchase/home-equity problem).

The ``pricelab`` command line runs TOML-described studies; see
:mod:`pricelab.cli`.
"""

__version__ = "0.1.0"

from .did import (
    DidResult,
    DidSpec,
    PreTrendTest,
    estimate_dynamic,
    estimate_static,
    estimate_triple,
    fitted_ate,
)
from .dgp import (
    ConfoundSpec,
    DgpConfig,
    EffectSpec,
    ErrorSpec,
    GroundTruth,
    SynthDgpConfig,
    SynthTruth,
    generate,
    generate_synth_panel,
    replicate_seeds,
)
from .errors import (
    AlignmentError,
    CalibrationError,
    ConfigError,
    ConvergenceError,
    CoverageError,
    CrossValidationError,
    DeflationError,
    DesignError,
    DivergenceError,
    EmptyDesignError,
    IdentificationError,
    InferenceError,
    IntegrityError,
    PricelabError,
    SchemaError,
    SolverError,
    StackingError,
)
from .housemodel import (
    ConstraintTiming,
    EtaEstimate,
    HouseholdParams,
    ModelPath,
    OwnRentSpread,
    PriceDecomposition,
    ThreePeriodProblem,
    ThreePeriodSolution,
    backward_price_path,
    budget_gaps,
    collateral_multiplier,
    collateral_service_flow,
    collateral_slack,
    constant_path,
    csf_level_for_eta,
    expectation,
    housing_foc_terms,
    lagrangian_gradient,
    lagrangian_gradient_fd,
    model_implied_eta,
    own_rent_spread,
    price_decomposition,
    price_foc_residual,
    solve_three_period,
    steady_state_price,
)
from .infer import (
    MaxSeReport,
    VariancePlan,
    VarianceResult,
    great_circle_km,
    max_se_report,
    vcov,
)
from .panel import (
    PanelDataset,
    apply_deflator,
    load_panel,
    prelaw_mean,
    stack_border_pairs,
    state_inverse_weights,
    write_csv,
)
from .regress import (
    Column,
    Constant,
    DesignSpec,
    DroppedColumnWarning,
    DummySet,
    FromYear,
    Indicator,
    Interaction,
    RegressionFit,
    Trend,
    absorb_fixed_effects,
    build_design,
    fit_wls,
)
from .synth import (
    CvResult,
    PlaceboSuite,
    SynthFit,
    SynthProblem,
    TreatmentPath,
    cross_validate,
    default_grid,
    fit_all_treated,
    fit_synth,
    placebo_suite,
    problem_from_panel,
    treatment_path,
)

__all__ = [name for name in dir() if not name.startswith("_")]
