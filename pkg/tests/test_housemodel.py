import numpy as np
import pytest

from pricelab import (
    CalibrationError,
    ConstraintTiming,
    DivergenceError,
    HouseholdParams,
    ModelPath,
    SolverError,
    ThreePeriodProblem,
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

from _oracles import pdv_constant_flows, three_period_grid


def test_collateral_multiplier_hand_value_and_states():
    mu = collateral_multiplier(1.0, 1.05, beta=0.96, rate_next2=0.03)
    assert mu == pytest.approx(1.0 - 0.96 * 1.03 / 1.05, abs=1e-15)
    spread = collateral_multiplier(
        1.0, [0.9, 1.2], beta=0.96, rate_next2=[0.02, 0.04], probs=[0.5, 0.5]
    )
    manual = 1.0 - 0.96 * (0.5 * 1.02 / 0.9 + 0.5 * 1.04 / 1.2)
    assert spread == pytest.approx(manual, abs=1e-15)


def test_collateral_multiplier_clips_roundoff_but_not_violations():
    beta, rate = 0.96, 0.03
    # Euler balance with c_next2 = 1 needs 1/c = beta * (1 + rate); nudge the
    # marginal utility just below that so the raw multiplier is -1e-12
    c_near = 1.0 / (beta * (1.0 + rate) - 1e-12)
    assert collateral_multiplier(c_near, 1.0, beta, rate) == 0.0
    with pytest.raises(CalibrationError):
        collateral_multiplier(2.0, 1.0, beta, rate)


def test_expectation_contract():
    assert expectation(3.5) == 3.5
    assert expectation([1.0, 3.0], [0.25, 0.75]) == pytest.approx(2.5)
    with pytest.raises(CalibrationError):
        expectation([1.0, 2.0])
    with pytest.raises(CalibrationError):
        expectation([1.0, 2.0], [0.6, 0.6])
    with pytest.raises(CalibrationError):
        expectation([1.0, 2.0], [1.5, -0.5])


def test_csf_zero_cases_are_exact():
    assert collateral_service_flow(1.3, 0.0, 0.8, 100.0) == 0.0
    assert collateral_service_flow(1.3, 0.05, 0.0, 100.0) == 0.0
    value = collateral_service_flow(2.0, 0.05, 0.8, 100.0)
    assert value == pytest.approx(0.05 * 0.8 * 100.0 / 2.0, rel=1e-15)
    with pytest.raises(CalibrationError):
        collateral_service_flow(0.0, 0.05, 0.8, 100.0)
    with pytest.raises(CalibrationError):
        collateral_service_flow(1.0, -0.01, 0.8, 100.0)
    with pytest.raises(CalibrationError):
        collateral_service_flow(1.0, 0.05, 0.8, 0.0)


def test_steady_state_price_formula():
    p = steady_state_price(rent_flow=0.3, beta=0.96, delta=0.025)
    assert p == pytest.approx(0.96 * 0.3 / (1.0 - 0.96 * 0.975), rel=1e-15)
    with_csf = steady_state_price(0.3, 0.96, 0.025, csf_flow=0.1)
    assert with_csf == pytest.approx(0.96 * 0.4 / (1.0 - 0.96 * 0.975), rel=1e-15)
    with pytest.raises(DivergenceError):
        steady_state_price(0.3, beta=1.2, delta=0.0)


def test_constant_path_balances_the_budget():
    params = HouseholdParams()
    path = constant_path(params, 5, consumption=1.0, housing=2.0, price=3.0)
    assert np.max(np.abs(budget_gaps(path, params))) < 1e-14
    slack = collateral_slack(path)
    assert np.allclose(slack, params.ltv_cap * 3.0 * 2.0, atol=1e-14)


def test_model_path_validation():
    with pytest.raises(CalibrationError):
        ModelPath(
            consumption=[1.0, -1.0],
            housing=[1.0, 1.0, 1.0],
            assets=[0.0, 0.0, 0.0],
            price=[1.0, 1.0],
            income=[1.0, 1.0],
            rate=[0.02, 0.02],
            multiplier=[0.0, 0.0],
            ltv_cap=[0.8, 0.8],
        )
    with pytest.raises(CalibrationError):
        ModelPath(
            consumption=[1.0, 1.0],
            housing=[1.0, 1.0],  # needs T + 1 entries
            assets=[0.0, 0.0, 0.0],
            price=[1.0, 1.0],
            income=[1.0, 1.0],
            rate=[0.02, 0.02],
            multiplier=[0.0, 0.0],
            ltv_cap=[0.8, 0.8],
        )


BACKWARD_TIMINGS = (
    ConstraintTiming.CURRENT_VALUE_CURRENT_STOCK,
    ConstraintTiming.CURRENT_VALUE_NEW_STOCK,
    ConstraintTiming.EXPECTED_VALUE_NEW_STOCK,
)


def test_backward_price_path_satisfies_the_foc():
    params = HouseholdParams(beta=0.95, delta=0.02, house_weight=0.3)
    t = 7
    rng = np.random.default_rng(5)
    c = 1.0 + 0.1 * rng.uniform(size=t)
    h = 2.0 + 0.1 * rng.uniform(size=t + 1)
    mu = np.array([0.0, 0.05, 0.02, 0.0, 0.03, 0.01, 0.0])
    cap = np.full(t, 0.8)
    for timing in BACKWARD_TIMINGS:
        prices = backward_price_path(params, c, h, mu, cap, 5.0, timing)
        path = ModelPath(
            consumption=c,
            housing=h,
            assets=np.zeros(t + 1),
            price=prices,
            income=np.ones(t),
            rate=np.full(t, params.effective_rate),
            multiplier=mu,
            ltv_cap=cap,
        )
        residuals = price_foc_residual(path, params, timing)
        assert np.max(np.abs(residuals)) < 1e-12, timing
    with pytest.raises(CalibrationError):
        backward_price_path(
            params, c, h, mu, cap, 5.0, ConstraintTiming.EXPECTED_VALUE_CURRENT_STOCK
        )


def test_timing_variants_agree_only_when_the_constraint_is_slack():
    params = HouseholdParams(beta=0.95, delta=0.0, house_weight=0.3)
    t = 6
    price = 4.0
    # constraint slack everywhere: all four variants are the same formula
    slack = constant_path(params, t, consumption=1.0, housing=2.0, price=price)
    residuals = [price_foc_residual(slack, params, tm) for tm in ConstraintTiming]
    for other in residuals[1:]:
        assert np.max(np.abs(residuals[0] - other)) < 1e-8

    # binding constraint: the current-stock group discounts the collateral
    # term, the new-stock group does not; the gap is (1 - beta) * mu cap p c
    mu = 0.05
    bound = constant_path(
        params, t, consumption=1.0, housing=2.0, price=price, multiplier=mu
    )
    res = {tm: price_foc_residual(bound, params, tm) for tm in ConstraintTiming}
    group_a = res[ConstraintTiming.CURRENT_VALUE_CURRENT_STOCK]
    group_b = res[ConstraintTiming.CURRENT_VALUE_NEW_STOCK]
    assert np.max(np.abs(group_a - res[ConstraintTiming.EXPECTED_VALUE_CURRENT_STOCK])) < 1e-12
    assert np.max(np.abs(group_b - res[ConstraintTiming.EXPECTED_VALUE_NEW_STOCK])) < 1e-12
    expected_gap = (1.0 - params.beta) * mu * params.ltv_cap * price * 1.0
    assert np.allclose(group_a - group_b, expected_gap, atol=1e-12)


def test_price_decomposition_matches_constant_flow_closed_form():
    m, delta, horizon = 0.97, 0.025, 30
    rent, csf = 0.3, 0.08
    decomp = price_decomposition(
        np.full(horizon, rent), np.full(horizon, csf), np.full(horizon, m), delta
    )
    head_rent, tail_rent = pdv_constant_flows(m, delta, rent, horizon)
    head_csf, tail_csf = pdv_constant_flows(m, delta, csf, horizon)
    assert decomp.rent_value == pytest.approx(head_rent, rel=1e-12)
    assert decomp.collateral_value == pytest.approx(head_csf, rel=1e-12)
    assert decomp.truncation_bound == pytest.approx(tail_rent + tail_csf, rel=1e-12)
    # for stationary flows the truncated total misses exactly the tail
    infinite = (head_rent + tail_rent) + (head_csf + tail_csf)
    assert abs(decomp.total - infinite) <= decomp.truncation_bound * (1 + 1e-12)


def test_price_decomposition_contracts():
    flows = np.full(10, 0.2)
    m = np.full(10, 0.96)
    with pytest.raises(CalibrationError):
        price_decomposition(flows, flows[:5], m, 0.02)
    with pytest.raises(CalibrationError):
        price_decomposition(flows, flows, m, 0.02, horizon=11)
    with pytest.raises(DivergenceError):
        price_decomposition(flows, flows, np.full(10, 1.03), 0.0)
    shorter = price_decomposition(flows, flows, m, 0.02, horizon=4)
    assert shorter.horizon == 4
    full = price_decomposition(flows, flows, m, 0.02)
    assert full.horizon == 10
    assert shorter.rent_value < full.rent_value
    assert shorter.truncation_bound > full.truncation_bound


def test_model_implied_eta_and_inversion_round_trip():
    m = np.full(25, 0.96)
    delta = 0.025
    price = 2.0
    eta = model_implied_eta(np.full(25, 0.04), m, delta, price)
    head, _ = pdv_constant_flows(0.96, delta, 0.04, 25)
    assert eta.value == pytest.approx(head / price, rel=1e-12)
    assert not eta.underestimates

    flagged = model_implied_eta(
        np.full(25, 0.04), m, delta, price, rents_fall_with_law=True
    )
    assert flagged.underestimates
    assert "lower bound" in flagged.note

    target = 0.042
    level = csf_level_for_eta(target, m, delta, price)
    back = model_implied_eta(np.full(25, level), m, delta, price)
    assert back.value == pytest.approx(target, abs=1e-10)
    assert csf_level_for_eta(0.0, m, delta, price) == 0.0


def test_own_rent_spread_decomposition():
    res = own_rent_spread(
        own_price=3.0,
        rent_price=2.5,
        sdf=[0.9, 1.0],
        csf_next=[0.1, 0.05],
        resale_next=[2.9, 3.1],
        delta=0.02,
        ownership_premium=1.05,
        probs=[0.4, 0.6],
    )
    spread = 3.0 - 1.05 * 2.5
    component = 0.4 * 0.9 * (0.1 + 0.98 * 2.9) + 0.6 * 1.0 * (0.05 + 0.98 * 3.1)
    assert res.spread == pytest.approx(spread, rel=1e-15)
    assert res.discounted_component == pytest.approx(component, rel=1e-15)
    assert res.residual == pytest.approx(spread - component, rel=1e-12)
    with pytest.raises(CalibrationError):
        own_rent_spread(3.0, 2.5, 0.9, 0.1, 2.9, 0.02, ownership_premium=0.9)


def test_household_params_validation():
    with pytest.raises(CalibrationError):
        HouseholdParams(beta=1.0)
    with pytest.raises(CalibrationError):
        HouseholdParams(delta=1.0)
    with pytest.raises(CalibrationError):
        HouseholdParams(house_weight=0.0)
    with pytest.raises(CalibrationError):
        HouseholdParams(tax_rate=1.0)
    with pytest.raises(CalibrationError):
        HouseholdParams(ownership_premium=0.5)
    params = HouseholdParams(legal_ltv_cap=0.6, lender_ltv_cap=0.9, tax_rate=0.3)
    assert params.ltv_cap == 0.6
    assert params.effective_rate == pytest.approx(0.7 * 0.02)


# ---------------------------------------------------------------------------
# three-period problem


CALIBRATIONS = (
    # (beta, house_weight, incomes, prices, gross_rate, purchase_cap, hel_cap)
    (0.95, 0.40, (0.6, 0.25, 4.0), (1.0, 1.05, 1.10), 1.03, 0.80, 0.5),
    (0.96, 0.30, (1.0, 1.0, 1.0), (1.0, 1.0, 1.0), 1.02, 0.80, 0.0),
    (0.90, 0.50, (2.0, 0.1, 1.0), (1.0, 1.20, 1.40), 1.05, 0.90, 0.8),
    (0.99, 0.20, (0.5, 3.0, 0.5), (1.0, 0.90, 0.80), 1.01, 0.50, 0.3),
    (0.95, 0.35, (1.5, 0.2, 2.5), (1.0, 1.0, 1.0), 1.04, 0.80, 0.6),
    (0.90, 0.25, (0.4, 0.4, 3.2), (1.0, 1.10, 1.25), 1.06, 0.95, 0.2),
)

EXPECTED_PATTERNS = (
    "hel_cap_only",
    "no_hel_loan_purchase_cap",
    "hel_cap_only",
    "hel_exhausted",
    "hel_cap_only",
    "hel_exhausted",
)


def make_problem(cal):
    beta, phi, incomes, prices, rate, kpm, khel = cal
    return ThreePeriodProblem(
        beta=beta,
        house_weight=phi,
        incomes=incomes,
        prices=prices,
        gross_rate=rate,
        purchase_ltv_cap=kpm,
        hel_ltv_cap=khel,
    )


@pytest.mark.parametrize("cal,pattern", list(zip(CALIBRATIONS, EXPECTED_PATTERNS)))
def test_three_period_solution_passes_kkt_and_grid_oracle(cal, pattern):
    problem = make_problem(cal)
    sol = solve_three_period(problem)
    assert sol.pattern == pattern

    # stationarity and complementary slackness at the solved point
    worst_stat = max(abs(v) for k, v in sol.kkt.items() if k.startswith("stat_"))
    worst_comp = max(abs(v) for k, v in sol.kkt.items() if k.startswith("comp_"))
    assert worst_stat < 1e-8
    assert worst_comp < 1e-8
    assert min(sol.purchase_loan, sol.hel_loan) >= -1e-9
    assert (
        min(
            sol.purchase_cap_mult,
            sol.hel_cap_mult,
            sol.purchase_floor_mult,
            sol.hel_floor_mult,
        )
        >= -1e-9
    )

    # stored consumptions satisfy the budget identities exactly
    y0, y1, y2 = problem.incomes
    p0, _, p2 = problem.prices
    r = problem.gross_rate
    c0, c1, c2 = sol.consumption
    assert c0 == pytest.approx(y0 + sol.purchase_loan - p0 * sol.housing, abs=1e-12)
    assert c1 == pytest.approx(y1 + sol.hel_loan, abs=1e-12)
    assert c2 == pytest.approx(
        y2 + p2 * sol.housing - r * r * sol.purchase_loan - r * sol.hel_loan,
        abs=1e-12,
    )

    # analytic and finite-difference Lagrangian gradients both vanish
    grad = lagrangian_gradient(sol, problem)
    grad_fd = lagrangian_gradient_fd(sol, problem)
    for name in grad:
        assert abs(grad[name]) < 1e-8, name
        assert abs(grad_fd[name]) < 1e-6, name
        assert grad[name] == pytest.approx(grad_fd[name], abs=1e-6)

    # housing FOC sides balance
    cost, benefit = housing_foc_terms(sol, problem)
    assert cost == pytest.approx(benefit, rel=1e-9)

    # independent refining grid search lands on the same optimum
    oracle = three_period_grid(*cal)
    assert abs(sol.utility - oracle["utility"]) < 2e-3
    assert abs(sol.housing - oracle["h"]) < 2e-3
    assert abs(sol.purchase_loan - oracle["purchase_loan"]) < 2e-3
    assert abs(sol.hel_loan - oracle["hel_loan"]) < 2e-3
    assert sol.utility >= oracle["utility"] - 1e-9


def test_no_hel_market_forces_zero_equity_loan():
    problem = make_problem(CALIBRATIONS[1])
    assert not problem.has_hel_market
    sol = solve_three_period(problem)
    assert sol.hel_loan == 0.0
    assert sol.pattern in ("no_hel_loan_purchase_cap", "no_hel_loan", "no_loans")
    # the cap multiplier reports the shadow value of the missing market
    assert sol.hel_cap_mult >= 0.0
    assert sol.kkt["slack_hel_cap"] == 0.0


def test_hel_exhausted_pattern_has_doubly_active_corner():
    problem = make_problem(CALIBRATIONS[3])
    sol = solve_three_period(problem)
    assert sol.pattern == "hel_exhausted"
    assert sol.hel_loan == 0.0
    # the carried purchase balance exhausts the written period-1 cap exactly
    khel, p1 = problem.hel_ltv_cap, problem.prices[1]
    cap_slack = khel * p1 * sol.housing - problem.gross_rate * sol.purchase_loan
    assert abs(cap_slack) < 1e-10
    assert sol.hel_cap_mult > 0.0
    assert sol.hel_floor_mult > 0.0


def test_solver_reports_per_pattern_diagnostics_when_infeasible():
    problem = ThreePeriodProblem(
        beta=0.95,
        house_weight=0.3,
        incomes=(1.0, -1.0, 1.0),  # period-1 consumption cannot be positive
        prices=(1.0, 1.0, 1.0),
        gross_rate=1.02,
        purchase_ltv_cap=0.8,
        hel_ltv_cap=0.0,
    )
    with pytest.raises(SolverError) as err:
        solve_three_period(problem)
    diags = err.value.diagnostics
    assert set(diags) == {"no_hel_loan_purchase_cap", "no_hel_loan", "no_loans"}


def test_three_period_problem_validation():
    with pytest.raises(CalibrationError):
        make_problem((1.5, 0.3, (1, 1, 1), (1, 1, 1), 1.02, 0.8, 0.5))
    with pytest.raises(CalibrationError):
        make_problem((0.95, 0.3, (1, 1, 1), (1, -1, 1), 1.02, 0.8, 0.5))
    with pytest.raises(CalibrationError):
        make_problem((0.95, 0.3, (1, 1, 1), (1, 1, 1), -1.0, 0.8, 0.5))
    with pytest.raises(CalibrationError):
        make_problem((0.95, 0.3, (1, 1, 1), (1, 1, 1), 1.02, -0.1, 0.5))
