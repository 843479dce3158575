import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pricelab import (
    Column,
    Constant,
    DesignError,
    DesignSpec,
    DroppedColumnWarning,
    DummySet,
    EmptyDesignError,
    FromYear,
    Indicator,
    Interaction,
    PanelDataset,
    Trend,
    absorb_fixed_effects,
    build_design,
    fit_wls,
)

from _oracles import dummy_wls_coefficients


def random_panel(rng, n_units=8, n_years=5, n_covs=2, unbalanced=False, weighted=True):
    rows = []
    for u in range(n_units):
        state = f"S{u % 3}"
        for t in range(n_years):
            if unbalanced and rng.random() < 0.15 and (u, t) != (0, 0):
                continue
            rows.append((f"u{u:02d}", state, 2000 + t))
    frame = pd.DataFrame(rows, columns=["unit", "state", "year"])
    n = len(frame)
    for j in range(n_covs):
        frame[f"x{j}"] = rng.standard_normal(n)
    frame["outcome"] = rng.standard_normal(n)
    if weighted:
        frame["weight"] = rng.uniform(0.5, 2.0, n)
    return PanelDataset(frame=frame, covariates=tuple(f"x{j}" for j in range(n_covs)))


def test_absorbed_fit_matches_explicit_dummies():
    rng = np.random.default_rng(0)
    for trial in range(6):
        ds = random_panel(rng, unbalanced=trial % 2 == 1)
        covs = list(ds.covariates)
        spec = DesignSpec(
            response="outcome",
            terms=tuple(Column(c) for c in covs),
            absorb=("unit", "year"),
        )
        fit = fit_wls(ds, spec)
        oracle = dummy_wls_coefficients(ds.frame, "outcome", covs, ["unit", "year"])
        assert np.max(np.abs(fit.coef - oracle)) < 1e-8


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n_units=st.integers(3, 10), n_years=st.integers(3, 6))
def test_absorbed_fit_matches_explicit_dummies_property(seed, n_units, n_years):
    rng = np.random.default_rng(seed)
    ds = random_panel(rng, n_units=n_units, n_years=n_years, n_covs=1)
    spec = DesignSpec(response="outcome", terms=(Column("x0"),), absorb=("unit", "year"))
    fit = fit_wls(ds, spec)
    oracle = dummy_wls_coefficients(ds.frame, "outcome", ["x0"], ["unit", "year"])
    assert np.max(np.abs(fit.coef - oracle)) < 1e-8


def test_row_order_invariance_is_exact():
    rng = np.random.default_rng(3)
    ds = random_panel(rng)
    spec = DesignSpec(
        response="outcome", terms=(Column("x0"), Column("x1")), absorb=("unit", "year")
    )
    fit1 = fit_wls(ds, spec)
    shuffled = PanelDataset(
        frame=ds.frame.sample(frac=1.0, random_state=99), covariates=ds.covariates
    )
    fit2 = fit_wls(shuffled, spec)
    assert np.array_equal(fit1.coef, fit2.coef)
    assert np.array_equal(fit1.residuals, fit2.residuals)


def test_single_dimension_absorbs_in_one_sweep():
    rng = np.random.default_rng(4)
    ds = random_panel(rng)
    spec = DesignSpec(response="outcome", terms=(Column("x0"),), absorb=("unit",))
    fit = fit_wls(ds, spec)
    assert fit.converged
    assert fit.iterations == 1


def test_demeaning_removes_group_means_under_weights():
    rng = np.random.default_rng(5)
    n = 60
    codes = rng.integers(0, 4, n)
    w = rng.uniform(0.2, 3.0, n)
    x = rng.standard_normal((n, 2))
    z, _, converged = absorb_fixed_effects(x, w, [codes])
    assert converged
    for g in range(4):
        sel = codes == g
        assert abs(np.sum(w[sel, None] * z[sel], axis=0)).max() < 1e-12


def test_collinear_column_is_dropped_with_warning():
    rng = np.random.default_rng(6)
    ds = random_panel(rng)
    ds = ds.with_columns(x_dup=2.0 * ds.column("x0"))
    spec = DesignSpec(
        response="outcome",
        terms=(Column("x0"), Column("x_dup")),
        absorb=("unit", "year"),
    )
    with pytest.warns(DroppedColumnWarning):
        fit = fit_wls(ds, spec)
    # exactly one of the pair survives (which one is a pivoting detail)
    assert len(fit.dropped) == 1
    assert set(fit.names) | set(fit.dropped) == {"x0", "x_dup"}
    with pytest.raises(KeyError) as err:
        fit.coefficient(fit.dropped[0])
    assert "dropped" in str(err.value)


def test_intercept_added_only_without_absorption():
    rng = np.random.default_rng(7)
    ds = random_panel(rng)
    plain = build_design(ds, DesignSpec(response="outcome", terms=(Column("x0"),)))
    assert plain.names[0] == "const"
    absorbed = build_design(
        ds, DesignSpec(response="outcome", terms=(Column("x0"),), absorb=("unit",))
    )
    assert "const" not in absorbed.names
    forced = build_design(
        ds,
        DesignSpec(response="outcome", terms=(Column("x0"),), add_intercept=False),
    )
    assert "const" not in forced.names


def test_everything_absorbed_raises_empty_design():
    rng = np.random.default_rng(8)
    ds = random_panel(rng)
    spec = DesignSpec(
        response="outcome", terms=(Constant(),), absorb=("unit",), add_intercept=False
    )
    with pytest.raises(EmptyDesignError):
        fit_wls(ds, spec)


def test_dummy_set_collinear_with_absorbed_dim_is_refused():
    rng = np.random.default_rng(9)
    ds = random_panel(rng)
    spec = DesignSpec(
        response="outcome", terms=(DummySet("unit"),), absorb=("unit",)
    )
    with pytest.raises(DesignError):
        build_design(ds, spec)


def test_duplicate_design_names_are_refused():
    rng = np.random.default_rng(10)
    ds = random_panel(rng)
    spec = DesignSpec(response="outcome", terms=(Column("x0"), Column("x0")))
    with pytest.raises(DesignError):
        build_design(ds, spec)


def test_doubled_weight_equals_duplicated_row():
    rng = np.random.default_rng(11)
    ds = random_panel(rng, weighted=False)
    frame = ds.frame.copy()
    frame["weight"] = 1.0
    target = frame.index[4]
    heavier = frame.copy()
    heavier.loc[target, "weight"] = 2.0

    dup_row = frame.loc[[target]].copy()
    dup_row["unit"] = "u_copy"
    duplicated = pd.concat([frame, dup_row])

    spec = DesignSpec(response="outcome", terms=(Column("x0"), Column("x1")))
    fit_w = fit_wls(PanelDataset(frame=heavier), spec)
    fit_d = fit_wls(PanelDataset(frame=duplicated), spec)
    assert np.allclose(fit_w.coef, fit_d.coef, atol=1e-12)


def test_dof_counts_absorbed_parameters_with_graph_correction():
    rng = np.random.default_rng(12)
    ds = random_panel(rng, n_units=6, n_years=4)
    spec = DesignSpec(response="outcome", terms=(Column("x0"),), absorb=("unit", "year"))
    fit = fit_wls(ds, spec)
    # balanced panel: one connected component, so units + years - 1
    assert fit.absorbed_params == 6 + 4 - 1
    assert fit.dof == fit.n_obs - fit.rank - fit.absorbed_params


def test_dof_with_disconnected_blocks():
    rng = np.random.default_rng(13)
    rows = []
    for u in range(4):
        years = (2000, 2001) if u < 2 else (2010, 2011)
        for year in years:
            rows.append((f"u{u}", "S0", year))
    frame = pd.DataFrame(rows, columns=["unit", "state", "year"])
    frame["x0"] = rng.standard_normal(len(frame))
    frame["outcome"] = rng.standard_normal(len(frame))
    ds = PanelDataset(frame=frame)
    fit = fit_wls(
        ds, DesignSpec(response="outcome", terms=(Column("x0"),), absorb=("unit", "year"))
    )
    # two disjoint unit/year blocks: 4 units + 4 years - 2 components
    assert fit.absorbed_params == 4 + 4 - 2


def test_term_expansion_names():
    rng = np.random.default_rng(14)
    ds = random_panel(rng)
    ds = PanelDataset(
        frame=ds.frame, covariates=ds.covariates, treatment_state="S0", treatment_year=2002
    )
    assert Indicator("state", "S0").expand(ds)[0][0] == "state=S0"
    assert FromYear(2002).expand(ds)[0][0] == "Post"
    assert Trend().expand(ds)[0][1].min() == 0.0
    names = [n for n, _ in DummySet("state").expand(ds)]
    assert names == ["state=S0", "state=S1", "state=S2"]
    inter = Interaction(Indicator("state", "S0", label="Texas"), FromYear(2002))
    assert inter.expand(ds)[0][0] == "Texas × Post"
    with pytest.raises(DesignError):
        Interaction(DummySet("state"), FromYear(2002), label="flat").expand(ds)


def test_interaction_distributes_over_dummy_sets():
    rng = np.random.default_rng(15)
    ds = random_panel(rng)
    cols = Interaction(DummySet("state"), FromYear(2002)).expand(ds)
    assert len(cols) == 3
    post = FromYear(2002).expand(ds)[0][1]
    for (name, values), state in zip(cols, ("S0", "S1", "S2")):
        manual = (ds.column("state") == state).astype(float) * post
        assert np.array_equal(values, manual)


def test_fit_statistics_are_consistent():
    rng = np.random.default_rng(16)
    ds = random_panel(rng)
    spec = DesignSpec(
        response="outcome", terms=(Column("x0"), Column("x1")), absorb=("unit", "year")
    )
    fit = fit_wls(ds, spec)
    assert fit.n_obs == len(ds)
    assert fit.rank == 2
    assert fit.design.shape == (fit.n_obs, fit.rank)
    # xtwx_inv really is the inverse of the weighted cross product
    xtwx = fit.design.T @ (fit.design * fit.weights[:, None])
    assert np.allclose(fit.xtwx_inv @ xtwx, np.eye(fit.rank), atol=1e-10)
    # weighted residuals are orthogonal to the kept design
    assert np.abs(fit.design.T @ (fit.weights * fit.residuals)).max() < 1e-10
