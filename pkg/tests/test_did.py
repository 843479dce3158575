import warnings

import numpy as np
import pandas as pd
import pytest
import scipy.stats

from pricelab import (
    DesignError,
    DidSpec,
    DroppedColumnWarning,
    IdentificationError,
    PanelDataset,
    VariancePlan,
    estimate_dynamic,
    estimate_static,
    estimate_triple,
    fitted_ate,
)
from pricelab import dgp

from _oracles import double_difference

TYEAR = 1997


def did_panel(
    seed=0,
    effect=0.05,
    noise_sd=0.01,
    years=range(1994, 2000),
    n_units=4,
    per_year_effects=None,
    exposure_effect=None,
    constant_treated_exposure=None,
    constant_exposure=None,
):
    """Balanced three-state panel with Texas treated from TYEAR on."""
    rng = np.random.default_rng(seed)
    states = ["Texas", "Utah", "Vermont"]
    rows = []
    for s in states:
        for u in range(n_units):
            unit = f"{s}-{u}"
            fe_u = rng.normal(0, 0.3)
            if constant_exposure is not None:
                expo = constant_exposure
            elif constant_treated_exposure is not None and s == "Texas":
                expo = constant_treated_exposure
            else:
                expo = rng.uniform(0.5, 2.5)
            for y in years:
                rows.append((unit, s, y, fe_u, expo))
    frame = pd.DataFrame(rows, columns=["unit", "state", "year", "fe_u", "exposure"])
    year_fe = {y: rng.normal(0, 0.1) for y in years}
    frame["fe_y"] = frame["year"].map(year_fe)
    treated_post = (frame["state"] == "Texas") & (frame["year"] >= TYEAR)
    gain = np.zeros(len(frame))
    if per_year_effects:
        for y, val in per_year_effects.items():
            gain[treated_post & (frame["year"] == y)] = val
    else:
        gain[treated_post] = effect
    if exposure_effect is not None:
        at_zero, slope = exposure_effect
        gain = treated_post * (at_zero + slope * frame["exposure"].to_numpy())
        gain += 0.02 * (frame["year"] >= TYEAR) * frame["exposure"]
    frame["outcome"] = (
        frame["fe_u"] + frame["fe_y"] + gain + noise_sd * rng.standard_normal(len(frame))
    )
    frame["weight"] = 1.0
    frame = frame.drop(columns=["fe_u", "fe_y"])
    ds = PanelDataset(frame=frame, covariates=("exposure",))
    return ds.with_treatment("Texas", TYEAR)


def test_static_equals_two_by_two_difference_on_balanced_panel():
    ds = did_panel(1, noise_sd=0.05)
    res = estimate_static(ds)
    oracle = double_difference(ds.frame, "outcome", "Texas", TYEAR)
    assert res.effect == pytest.approx(oracle, abs=1e-10)
    assert res.effect_term == "Texas × Post"
    assert res.mode == "static"


def test_static_recovers_truth_without_noise():
    ds = did_panel(2, effect=0.0713, noise_sd=0.0)
    res = estimate_static(ds)
    assert res.effect == pytest.approx(0.0713, abs=1e-12)


def test_static_on_generated_panel():
    cfg = dgp.DgpConfig(effect=dgp.EffectSpec(kind="constant", size=0.05))
    ds, truth = dgp.generate(cfg, 20)
    res = estimate_static(ds, plans=[VariancePlan.cluster("state")])
    assert res.effect == pytest.approx(0.05, abs=0.02)
    assert res.se(res.effect_term) > 0.0


def test_static_requires_treatment_assignment():
    ds = did_panel(3)
    bare = PanelDataset(frame=ds.frame, covariates=ds.covariates)
    with pytest.raises(DesignError):
        estimate_static(bare)
    with pytest.raises(DesignError):
        estimate_static(ds, DidSpec(mode="dynamic"))


def test_dynamic_omits_base_year_and_recovers_path():
    path = {1997: 0.02, 1998: 0.035, 1999: 0.05}
    ds = did_panel(4, per_year_effects=path, noise_sd=0.0)
    res = estimate_dynamic(ds)
    assert res.base_year == TYEAR - 1
    assert TYEAR - 1 not in res.year_effects
    assert set(res.year_effects) == {1994, 1995, 1997, 1998, 1999}
    for y, val in path.items():
        assert res.year_effects[y] == pytest.approx(val, abs=1e-12)
    for y in (1994, 1995):
        assert res.year_effects[y] == pytest.approx(0.0, abs=1e-12)
    assert res.year_terms[1998] == "Texas × 1998"


def test_dynamic_base_year_validation():
    ds = did_panel(5)
    res = estimate_dynamic(ds, DidSpec(mode="dynamic", base_year=1994))
    assert 1994 not in res.year_effects and 1996 in res.year_effects
    with pytest.raises(DesignError):
        estimate_dynamic(ds, DidSpec(mode="dynamic", base_year=1990))
    with pytest.raises(DesignError):
        estimate_dynamic(ds, DidSpec(mode="dynamic", base_year=TYEAR))


def test_dynamic_with_single_pre_year_reduces_to_static():
    ds = did_panel(6, years=range(1996, 1999), noise_sd=0.03)
    with pytest.raises(DesignError):
        estimate_dynamic(ds)
    res = estimate_dynamic(ds, require_pre_trends=False)
    static = estimate_static(ds)
    post = {y: v for y, v in res.year_effects.items() if y >= TYEAR}
    assert set(post) == {1997, 1998}
    # with one pre year the event study and the static design span the same
    # space, so the average of the post effects matches the pooled coefficient
    assert np.mean(list(post.values())) == pytest.approx(static.effect, abs=1e-10)


def test_pre_trend_wald_matches_manual_computation():
    ds = did_panel(7, noise_sd=0.04)
    plans = [VariancePlan.hc(), VariancePlan.cluster("state")]
    res = estimate_dynamic(ds, plans=plans)
    pt = res.pre_trend
    assert pt is not None
    assert pt.plan_label == "hc"
    assert pt.terms == ("Texas × 1994", "Texas × 1995")
    idx = [res.fit.names.index(t) for t in pt.terms]
    est = res.fit.coef[idx]
    sub = res.vcovs["hc"].cov[np.ix_(idx, idx)]
    stat = float(est @ np.linalg.solve(sub, est)) / len(idx)
    assert pt.stat == pytest.approx(stat, rel=1e-12)
    assert pt.dof_num == 2
    assert pt.p_value == pytest.approx(
        scipy.stats.f.sf(stat, 2, res.vcovs["hc"].dof_test), rel=1e-12
    )


def test_triple_recovers_level_and_slope_exactly():
    ds = did_panel(8, exposure_effect=(0.063, -0.009), noise_sd=0.0)
    spec = DidSpec(mode="triple", heterogeneity="exposure")
    with warnings.catch_warnings():
        # the routine absorption of the treated-by-exposure level term
        # should not warn; anything else surfacing here is a real problem
        warnings.simplefilter("error")
        res = estimate_triple(ds, spec)
    assert res.ate_at_zero == pytest.approx(0.063, abs=1e-10)
    assert res.ate_slope == pytest.approx(-0.009, abs=1e-10)
    assert res.level_term == "Texas × Post"
    assert res.slope_term == "Texas × Post × exposure"
    assert res.fitted_ate(7.0 / 6.0) == pytest.approx(0.0525, abs=1e-10)
    assert fitted_ate((0.063, -0.009), 7.0 / 6.0) == pytest.approx(0.0525, abs=1e-14)
    # the treated-by-exposure level term is unit-constant, hence absorbed
    assert "Texas × exposure" in res.fit.dropped


def test_triple_degenerate_exposure_collapses_to_static():
    ds = did_panel(9, constant_exposure=1.4, noise_sd=0.03)
    spec = DidSpec(mode="triple", heterogeneity="exposure")
    with pytest.raises(IdentificationError):
        estimate_triple(ds, spec)
    with pytest.warns(DroppedColumnWarning):
        res = estimate_triple(ds, spec, allow_degenerate=True)
    static = estimate_static(ds)
    assert res.fitted_ate(1.4) == pytest.approx(static.effect, abs=1e-8)
    assert 0.0 in (res.ate_at_zero, res.ate_slope)


def test_triple_zero_exposure_on_treated_is_refused():
    ds = did_panel(14, constant_treated_exposure=0.0)
    with pytest.raises(IdentificationError):
        estimate_triple(ds, DidSpec(mode="triple", heterogeneity="exposure"))


def test_triple_centering_shifts_the_level_not_the_slope():
    ds = did_panel(10, exposure_effect=(0.04, 0.011), noise_sd=0.02)
    plain = estimate_triple(ds, DidSpec(mode="triple", heterogeneity="exposure"))
    centered = estimate_triple(
        ds, DidSpec(mode="triple", heterogeneity="exposure", center_heterogeneity=True)
    )
    mean = float(ds.column("exposure").mean())
    assert centered.ate_slope == pytest.approx(plain.ate_slope, abs=1e-10)
    assert centered.ate_at_zero == pytest.approx(
        plain.ate_at_zero + plain.ate_slope * mean, abs=1e-10
    )
    assert centered.slope_term.endswith("exposure_centered")


def test_triple_validates_the_exposure_column():
    ds = did_panel(11)
    with pytest.raises(DesignError):
        estimate_triple(ds, DidSpec(mode="triple"))
    bad = ds.with_columns(holes=np.where(ds.frame["year"] == 1994, np.nan, 1.0))
    with pytest.raises(DesignError):
        estimate_triple(bad, DidSpec(mode="triple", heterogeneity="holes"))


def test_confidence_interval_uses_t_critical_values():
    ds = did_panel(12, noise_sd=0.05)
    res = estimate_static(ds, plans=[VariancePlan.cluster("state")])
    term = res.effect_term
    lo, hi = res.confidence_interval(term, "cluster(state)")
    se = res.vcovs["cluster(state)"].se[term]
    crit = scipy.stats.t.ppf(0.975, df=res.vcovs["cluster(state)"].dof_test)
    assert hi - lo == pytest.approx(2 * crit * se, rel=1e-12)
    assert (lo + hi) / 2 == pytest.approx(res.effect, rel=1e-12)
    assert res.se(term, "cluster(state)") == se
    assert res.se(term) == res.max_report.max_se[term]
