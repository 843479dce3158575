"""Difference-in-differences study designs on top of the WLS engine.

Three designs share one compilation path into :class:`~pricelab.regress.DesignSpec`:

- static: a single treated-state-by-post interaction,
- dynamic: one treated-state-by-year interaction per year except a base year
  (the year before treatment by default), whose effect is normalised to zero,
- triple: the static interaction plus a heterogeneous-exposure slope, with the
  lower-order interactions included. When unit effects are absorbed the
  treated-by-exposure level term is collinear with them and is dropped by the
  rank handling, which mirrors how such designs behave with explicit dummies.

Effect coefficients are named after what they are ("Texas × Post",
"Texas × 1996", "Texas × Post × exposure"), so output tables read like the
study they implement.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.stats

from .errors import DesignError, IdentificationError
from .infer import MaxSeReport, VariancePlan, VarianceResult, max_se_report, vcov
from .panel import PanelDataset
from .regress import (
    Column,
    DesignSpec,
    DroppedColumnWarning,
    FromYear,
    Indicator,
    Interaction,
    RegressionFit,
    Term,
    fit_wls,
)

MODES = ("static", "dynamic", "triple")


@dataclass(frozen=True)
class DidSpec:
    """Configuration for a difference-in-differences design.

    Parameters
    ----------
    mode : str
        "static", "dynamic" or "triple".
    base_year : int, optional
        Omitted year for the dynamic design; defaults to treatment_year - 1.
    heterogeneity : str, optional
        Column with the unit-level exposure measure (triple mode). Not
        centered unless ``center_heterogeneity`` is set.
    controls : tuple of Term
        Extra design terms (oil-by-region interactions, trends, ...).
    absorb : tuple of str
        FE dimensions to absorb; unit and year by default.
    """

    mode: str = "static"
    base_year: int | None = None
    heterogeneity: str | None = None
    center_heterogeneity: bool = False
    controls: tuple[Term, ...] = ()
    absorb: tuple[str, ...] = ("unit", "year")
    weight_column: str | None = "weight"

    def __post_init__(self):
        if self.mode not in MODES:
            raise DesignError(f"unknown DID mode {self.mode!r}")
        object.__setattr__(self, "controls", tuple(self.controls))
        object.__setattr__(self, "absorb", tuple(self.absorb))


@dataclass
class PreTrendTest:
    """Joint Wald test that all pre-period effects are zero."""

    stat: float
    dof_num: int
    dof_den: float
    p_value: float
    plan_label: str
    terms: tuple[str, ...]


@dataclass
class DidResult:
    mode: str
    fit: RegressionFit
    vcovs: dict[str, VarianceResult]
    max_report: MaxSeReport | None
    effect: float | None = None
    effect_term: str | None = None
    year_effects: dict[int, float] | None = None
    year_terms: dict[int, str] | None = None
    base_year: int | None = None
    ate_at_zero: float | None = None
    ate_slope: float | None = None
    level_term: str | None = None
    slope_term: str | None = None
    pre_trend: PreTrendTest | None = None

    def se(self, term: str, plan_label: str | None = None) -> float:
        if plan_label is None:
            if self.max_report is None:
                raise DesignError("no variance plans were evaluated")
            return self.max_report.max_se[term]
        return self.vcovs[plan_label].se[term]

    def confidence_interval(
        self, term: str, plan_label: str, level: float = 0.95
    ) -> tuple[float, float]:
        res = self.vcovs[plan_label]
        est = self.fit.coefficient(term)
        se = res.se[term]
        crit = scipy.stats.t.ppf(0.5 + level / 2.0, df=res.dof_test)
        return est - crit * se, est + crit * se

    def fitted_ate(self, exposure: float) -> float:
        return fitted_ate(self, exposure)


def _require_treatment(ds: PanelDataset) -> tuple[str, int]:
    if ds.treatment_state is None or ds.treatment_year is None:
        raise DesignError("dataset needs treatment_state and treatment_year set")
    return ds.treatment_state, ds.treatment_year


def _treated_term(state: str) -> Indicator:
    return Indicator("state", state, label=state)


def _evaluate_plans(fit: RegressionFit, plans: Sequence[VariancePlan]):
    if not plans:
        return {}, None
    report = max_se_report(fit, plans)
    return {res.label: res for res in report.results}, report


def estimate_static(
    ds: PanelDataset,
    spec: DidSpec | None = None,
    plans: Sequence[VariancePlan] = (),
) -> DidResult:
    """Static design: one coefficient on treated-state-by-post."""
    spec = spec or DidSpec(mode="static")
    if spec.mode != "static":
        raise DesignError(f"estimate_static got a spec with mode {spec.mode!r}")
    state, year = _require_treatment(ds)
    term = Interaction(_treated_term(state), FromYear(year))
    name = f"{state} × Post"
    design = DesignSpec(
        response="outcome",
        terms=(term,) + spec.controls,
        absorb=spec.absorb,
        weight_column=spec.weight_column,
    )
    fit = fit_wls(ds, design)
    if name not in fit.names:
        raise IdentificationError(
            f"effect term {name!r} was dropped as collinear; the design "
            "cannot identify the treatment effect"
        )
    vcovs, report = _evaluate_plans(fit, plans)
    return DidResult(
        mode="static",
        fit=fit,
        vcovs=vcovs,
        max_report=report,
        effect=fit.coefficient(name),
        effect_term=name,
    )


def estimate_dynamic(
    ds: PanelDataset,
    spec: DidSpec | None = None,
    plans: Sequence[VariancePlan] = (),
    require_pre_trends: bool = True,
) -> DidResult:
    """Event-study design: per-year effects relative to a base year.

    The base year (treatment_year - 1 unless overridden) is omitted, so its
    effect is identically zero and never appears in the output map. At least
    two pre-treatment years are required so a pre-trend is inspectable; pass
    ``require_pre_trends=False`` for the degenerate two-year design, which
    reduces to the static estimator.
    """
    spec = spec or DidSpec(mode="dynamic")
    if spec.mode != "dynamic":
        raise DesignError(f"estimate_dynamic got a spec with mode {spec.mode!r}")
    state, tyear = _require_treatment(ds)
    years = [int(y) for y in ds.years]
    base = spec.base_year if spec.base_year is not None else tyear - 1
    if base not in years:
        raise DesignError(f"base year {base} is not an observed year")
    if base >= tyear:
        raise DesignError(f"base year {base} must precede treatment year {tyear}")
    pre_years = [y for y in years if y < tyear]
    if require_pre_trends and len(pre_years) < 2:
        raise DesignError(
            f"dynamic design needs at least two pre-treatment years, found "
            f"{pre_years}; only the base year is not enough to inspect trends"
        )
    event_years = [y for y in years if y != base]
    terms = tuple(
        Interaction(_treated_term(state), Indicator("year", y, label=str(y)))
        for y in event_years
    )
    names = {y: f"{state} × {y}" for y in event_years}
    design = DesignSpec(
        response="outcome",
        terms=terms + spec.controls,
        absorb=spec.absorb,
        weight_column=spec.weight_column,
    )
    fit = fit_wls(ds, design)
    missing = [y for y, n in names.items() if n not in fit.names]
    if missing:
        raise IdentificationError(
            f"event-year terms for {missing} were dropped as collinear"
        )
    year_effects = {y: fit.coefficient(names[y]) for y in event_years}
    vcovs, report = _evaluate_plans(fit, plans)

    pre_trend = None
    if plans:
        pre_terms = tuple(names[y] for y in event_years if y < tyear)
        if pre_terms:
            pre_trend = _joint_wald(fit, vcovs[plans[0].display_label], pre_terms)
    return DidResult(
        mode="dynamic",
        fit=fit,
        vcovs=vcovs,
        max_report=report,
        year_effects=year_effects,
        year_terms=names,
        base_year=base,
        pre_trend=pre_trend,
    )


def _joint_wald(
    fit: RegressionFit, res: VarianceResult, terms: tuple[str, ...]
) -> PreTrendTest:
    idx = [fit.names.index(t) for t in terms]
    est = fit.coef[idx]
    sub = res.cov[np.ix_(idx, idx)]
    stat = float(est @ np.linalg.solve(sub, est))
    q = len(terms)
    fstat = stat / q
    if np.isfinite(res.dof_test):
        p = float(scipy.stats.f.sf(fstat, q, res.dof_test))
    else:
        p = float(scipy.stats.chi2.sf(stat, q))
    return PreTrendTest(
        stat=fstat,
        dof_num=q,
        dof_den=res.dof_test,
        p_value=p,
        plan_label=res.label,
        terms=terms,
    )


def estimate_triple(
    ds: PanelDataset,
    spec: DidSpec,
    plans: Sequence[VariancePlan] = (),
    allow_degenerate: bool = False,
) -> DidResult:
    """Triple-difference design with a heterogeneous exposure slope.

    Estimates the treated-post effect at zero exposure and its slope in the
    exposure measure; the fitted average effect at exposure value h is
    ``ate_at_zero + ate_slope * h``. Lower-order interactions are included;
    with unit effects absorbed the treated-by-exposure level term is dropped
    as collinear (recorded on the fit).
    """
    if spec.mode != "triple":
        raise DesignError(f"estimate_triple got a spec with mode {spec.mode!r}")
    if not spec.heterogeneity:
        raise DesignError("triple design needs a heterogeneity column")
    state, year = _require_treatment(ds)
    column = spec.heterogeneity
    values = ds.column(column).astype(float)
    if not np.all(np.isfinite(values)):
        raise DesignError(f"heterogeneity column {column!r} has non-finite values")

    if not allow_degenerate:
        treated = ds.column("state") == state
        for label, mask in (("treated", treated), ("control", ~treated)):
            subset = values[mask]
            if subset.size == 0 or np.ptp(subset) == 0.0:
                raise IdentificationError(
                    f"exposure {column!r} has no variation within the {label} "
                    "group; the slope is not identified"
                )

    if spec.center_heterogeneity:
        centered = f"{column}_centered"
        ds = ds.with_columns(**{centered: values - values.mean()})
        column = centered

    treat = _treated_term(state)
    post = FromYear(year)
    expo = Column(column)
    t_p = Interaction(treat, post)
    terms = (
        t_p,
        Interaction(treat, expo),
        Interaction(post, expo),
        Interaction(treat, post, expo),
    )
    level_name = f"{state} × Post"
    slope_name = f"{state} × Post × {column}"
    design = DesignSpec(
        response="outcome",
        terms=terms + spec.controls,
        absorb=spec.absorb,
        weight_column=spec.weight_column,
    )
    # losing the unit-constant treated-by-exposure term to the unit effects
    # is the normal shape of this design, so that drop alone stays quiet
    expected_drop = f"{state} × {column}"
    with warnings.catch_warnings():
        if "unit" in spec.absorb:
            warnings.filterwarnings(
                "ignore",
                category=DroppedColumnWarning,
                message=re.escape(f"dropped rank-deficient design columns: ['{expected_drop}']"),
            )
        fit = fit_wls(ds, design)
    effects = {}
    for needed in (level_name, slope_name):
        if needed in fit.names:
            effects[needed] = fit.coefficient(needed)
        elif allow_degenerate:
            # A degenerate exposure makes this term collinear with another
            # effect term; the dropped coefficient is pinned at zero.
            effects[needed] = 0.0
        else:
            raise IdentificationError(
                f"term {needed!r} was dropped as collinear; effect not identified"
            )
    vcovs, report = _evaluate_plans(fit, plans)
    return DidResult(
        mode="triple",
        fit=fit,
        vcovs=vcovs,
        max_report=report,
        ate_at_zero=effects[level_name],
        ate_slope=effects[slope_name],
        level_term=level_name,
        slope_term=slope_name,
    )


def fitted_ate(result, exposure: float) -> float:
    """Fitted average treatment effect at an exposure value.

    Accepts a triple-design :class:`DidResult` or a plain
    ``(ate_at_zero, ate_slope)`` pair.
    """
    if isinstance(result, DidResult):
        if result.mode != "triple":
            raise DesignError(
                f"fitted_ate needs a triple design result, got {result.mode!r}"
            )
        at_zero, slope = result.ate_at_zero, result.ate_slope
    else:
        at_zero, slope = result
    return at_zero + slope * exposure
