"""Collateral-constrained household model of house prices.

A household with log-separable utility over non-durable consumption and
housing services faces a period budget constraint and a collateral constraint
that caps borrowing at a loan-to-value fraction of housing collateral. The
binding constraint puts a wedge (the constraint multiplier) into the asset
Euler equation, and the housing first-order condition then prices a house as
the discounted stream of rents plus a collateral service flow (CSF): the
extra value of being able to borrow against the house.

The module provides

- the constraint multiplier implied by consumption paths,
- the CSF and the housing FOC residual under four constraint-timing variants
  (borrow against current or expected-next-period value, of the current or
  the newly chosen housing stock),
- a present-value decomposition of prices into rents and collateral value
  with an explicit geometric truncation bound,
- the model-implied price effect of legalising home-equity borrowing, and
  its inversion (what CSF level rationalises an observed effect),
- a three-period purchase-versus-home-equity-loan problem solved by
  enumerating constraint-activity patterns and verifying the KKT conditions,
- the own-versus-rent price identity with an ownership utility premium.

Expectations are taken over a user-supplied discrete state grid with
probabilities; a deterministic path is the single-state special case.

Note on timing variants: when the constraint binds, variants that collateralise
the *current* stock put the collateral term inside next period's expectation
(discounted), while variants that collateralise the *newly chosen* stock put
it in the current period (undiscounted); the two groups differ by exactly one
discount factor and only coincide when the multiplier is zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from .errors import CalibrationError, DivergenceError, SolverError


# ---------------------------------------------------------------------------
# parameters and primitives


@dataclass(frozen=True)
class HouseholdParams:
    """Preference and constraint parameters.

    ``legal_ltv_cap`` is the statutory cap on home-equity extraction and
    ``lender_ltv_cap`` the lender's underwriting cap; borrowing is limited by
    whichever is tighter. The borrowing rate households perceive is the
    contract rate net of the tax advantage: (1 - tax_rate) * contract_rate.
    """

    beta: float = 0.96
    delta: float = 0.025
    house_weight: float = 0.3
    legal_ltv_cap: float = 0.8
    lender_ltv_cap: float = 1.0
    tax_rate: float = 0.0
    contract_rate: float = 0.02
    ownership_premium: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise CalibrationError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0.0 <= self.delta < 1.0:
            raise CalibrationError(f"delta must lie in [0, 1), got {self.delta}")
        if self.house_weight <= 0.0:
            raise CalibrationError("house_weight must be positive")
        if self.legal_ltv_cap < 0.0 or self.lender_ltv_cap < 0.0:
            raise CalibrationError("loan-to-value caps must be nonnegative")
        if not 0.0 <= self.tax_rate < 1.0:
            raise CalibrationError("tax_rate must lie in [0, 1)")
        if self.ownership_premium < 1.0:
            raise CalibrationError("ownership_premium must be at least 1")

    @property
    def ltv_cap(self) -> float:
        """Effective borrowing cap: the tighter of law and lender."""
        return min(self.legal_ltv_cap, self.lender_ltv_cap)

    @property
    def effective_rate(self) -> float:
        """After-tax borrowing rate (1 - tax_rate) * contract_rate."""
        return effective_rate(self.tax_rate, self.contract_rate)


def effective_rate(tax_rate: float, contract_rate: float) -> float:
    return (1.0 - tax_rate) * contract_rate


def marginal_utility(consumption) -> np.ndarray | float:
    """u_c for log utility, with a positivity domain check."""
    c = np.asarray(consumption, dtype=float)
    if np.any(c <= 0.0) or not np.all(np.isfinite(c)):
        raise CalibrationError("consumption must be positive and finite")
    out = 1.0 / c
    return out if out.ndim else float(out)


def expectation(values, probs=None) -> float:
    """Expectation over a discrete state grid; identity for a scalar."""
    v = np.atleast_1d(np.asarray(values, dtype=float))
    if probs is None:
        if v.size != 1:
            raise CalibrationError("several states need explicit probabilities")
        return float(v[0])
    p = np.asarray(probs, dtype=float)
    if p.shape != v.shape:
        raise CalibrationError("probabilities and values must align")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise CalibrationError("probabilities must be nonnegative and sum to 1")
    return float(p @ v)


def collateral_multiplier(
    c_next,
    c_next2,
    beta: float,
    rate_next2,
    probs=None,
    slack_tol: float = 1e-9,
) -> float:
    """Constraint multiplier from the liquidity-constrained Euler equation.

    mu_{t+1} = u_c(c_{t+1}) - beta * E[(1 + r_{t+2}) u_c(c_{t+2})].

    A binding constraint keeps consumption today below its Euler level, so
    the multiplier is positive. If the plan is unconstrained the asset FOC
    must hold with equality, so a computed value below zero is only tolerated
    within ``slack_tol`` (roundoff) and is clipped to exactly zero; anything
    more negative means the inputs contradict optimality.
    """
    uc_now = marginal_utility(c_next)
    uc_later = marginal_utility(c_next2)
    rate = np.asarray(rate_next2, dtype=float)
    mu = float(uc_now) - beta * expectation((1.0 + rate) * uc_later, probs)
    if mu < 0.0:
        if mu < -slack_tol:
            raise CalibrationError(
                f"asset FOC violated: implied multiplier {mu:.3e} is negative "
                "beyond roundoff; an unconstrained plan must satisfy the Euler "
                "equation with equality"
            )
        return 0.0
    return mu


def collateral_service_flow(
    marg_util: float, multiplier: float, ltv_cap: float, price: float
) -> float:
    """CSF = multiplier * cap * price / marginal utility (consumption units).

    Zero cap (borrowing illegal) or zero multiplier (constraint slack) force
    a zero flow exactly.
    """
    if marg_util <= 0.0:
        raise CalibrationError("marginal utility must be positive")
    if multiplier < 0.0:
        raise CalibrationError("multiplier must be nonnegative")
    if ltv_cap < 0.0:
        raise CalibrationError("ltv_cap must be nonnegative")
    if price <= 0.0:
        raise CalibrationError("price must be positive")
    return multiplier * ltv_cap * price / marg_util


# ---------------------------------------------------------------------------
# paths and the housing first-order condition


class ConstraintTiming(enum.Enum):
    """Which collateral value caps borrowing at time t."""

    CURRENT_VALUE_CURRENT_STOCK = "current_value_current_stock"  # p_t h_t
    EXPECTED_VALUE_CURRENT_STOCK = "expected_value_current_stock"  # E[p_{t+1}] h_t
    CURRENT_VALUE_NEW_STOCK = "current_value_new_stock"  # p_t h_{t+1}
    EXPECTED_VALUE_NEW_STOCK = "expected_value_new_stock"  # E[p_{t+1}] h_{t+1}


@dataclass(frozen=True)
class ModelPath:
    """A deterministic model path over T periods.

    ``consumption``, ``price``, ``income``, ``rate``, ``multiplier`` and
    ``ltv_cap`` have length T; ``housing`` and ``assets`` have length T + 1
    (entry t is the stock or asset position held during period t, so the
    period-t choice is entry t + 1).
    """

    consumption: np.ndarray
    housing: np.ndarray
    assets: np.ndarray
    price: np.ndarray
    income: np.ndarray
    rate: np.ndarray
    multiplier: np.ndarray
    ltv_cap: np.ndarray

    def __post_init__(self):
        arrays = {
            name: np.asarray(getattr(self, name), dtype=float)
            for name in (
                "consumption",
                "housing",
                "assets",
                "price",
                "income",
                "rate",
                "multiplier",
                "ltv_cap",
            )
        }
        t = arrays["consumption"].shape[0]
        if t < 1:
            raise CalibrationError("path needs at least one period")
        for name in ("price", "income", "rate", "multiplier", "ltv_cap"):
            if arrays[name].shape != (t,):
                raise CalibrationError(f"{name} must have length {t}")
        for name in ("housing", "assets"):
            if arrays[name].shape != (t + 1,):
                raise CalibrationError(f"{name} must have length {t + 1}")
        if np.any(arrays["consumption"] <= 0) or np.any(arrays["housing"] <= 0):
            raise CalibrationError("consumption and housing must stay positive")
        if np.any(arrays["multiplier"] < 0):
            raise CalibrationError("multiplier path must be nonnegative")
        if np.any(arrays["ltv_cap"] < 0):
            raise CalibrationError("ltv_cap path must be nonnegative")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def n_periods(self) -> int:
        return self.consumption.shape[0]


def constant_path(
    params: HouseholdParams,
    n_periods: int,
    consumption: float,
    housing: float,
    price: float,
    multiplier: float = 0.0,
    rate: float | None = None,
    assets: float = 0.0,
    income: float | None = None,
) -> ModelPath:
    """A stationary path, mostly a convenience for tests and calibrations.

    Income is backed out from the budget identity unless given explicitly.
    """
    t = n_periods
    r = params.effective_rate if rate is None else rate
    if income is None:
        income = consumption + price * housing * params.delta - r * assets
    return ModelPath(
        consumption=np.full(t, float(consumption)),
        housing=np.full(t + 1, float(housing)),
        assets=np.full(t + 1, float(assets)),
        price=np.full(t, float(price)),
        income=np.full(t, float(income)),
        rate=np.full(t, float(r)),
        multiplier=np.full(t, float(multiplier)),
        ltv_cap=np.full(t, params.ltv_cap),
    )


def budget_gaps(path: ModelPath, params: HouseholdParams) -> np.ndarray:
    """Period budget identity violations (zero on a consistent path).

    gap_t = c_t + p_t h_{t+1} + a_{t+1}
            - y_t - p_t h_t (1 - delta) - (1 + r_t) a_t
    """
    c, h, a = path.consumption, path.housing, path.assets
    p, y, r = path.price, path.income, path.rate
    t = path.n_periods
    idx = np.arange(t)
    return (
        c
        + p * h[idx + 1]
        + a[idx + 1]
        - y
        - p * h[idx] * (1.0 - params.delta)
        - (1.0 + r) * a[idx]
    )


def collateral_slack(path: ModelPath) -> np.ndarray:
    """Slack in the borrowing cap, cap_t * p_t * h_t + a_{t+1} (>= 0)."""
    t = path.n_periods
    idx = np.arange(t)
    return path.ltv_cap * path.price * path.housing[idx] + path.assets[idx + 1]


def price_foc_residual(
    path: ModelPath,
    params: HouseholdParams,
    timing: ConstraintTiming = ConstraintTiming.CURRENT_VALUE_CURRENT_STOCK,
) -> np.ndarray:
    """Housing FOC residuals along a deterministic path.

    Returns one residual per period t = 0 .. T-3 (the window every timing
    variant can evaluate): the current price minus the discounted next-period
    payoff of rent, collateral service and resale. Zero along a path that
    solves the household problem under the given timing.
    """
    t = path.n_periods
    if t < 3:
        raise CalibrationError("need at least three periods for FOC residuals")
    c, h, p = path.consumption, path.housing, path.price
    mu, cap = path.multiplier, path.ltv_cap
    phi = params.house_weight
    delta = params.delta
    beta = params.beta
    out = np.empty(t - 2)
    for i in range(t - 2):
        sdf = beta * c[i] / c[i + 1]
        rent = phi / h[i + 1] * c[i + 1]
        resale = (1.0 - delta) * p[i + 1]
        if timing is ConstraintTiming.CURRENT_VALUE_CURRENT_STOCK:
            csf = mu[i + 1] * cap[i + 1] * p[i + 1] * c[i + 1]
            out[i] = p[i] - sdf * (rent + csf + resale)
        elif timing is ConstraintTiming.EXPECTED_VALUE_CURRENT_STOCK:
            csf = mu[i + 1] * cap[i + 1] * p[i + 2] * c[i + 1]
            out[i] = p[i] - sdf * (rent + csf + resale)
        elif timing is ConstraintTiming.CURRENT_VALUE_NEW_STOCK:
            csf_now = mu[i] * cap[i] * p[i] * c[i]
            out[i] = p[i] - sdf * (rent + resale) - csf_now
        else:  # EXPECTED_VALUE_NEW_STOCK
            csf_now = mu[i] * cap[i] * p[i + 1] * c[i]
            out[i] = p[i] - sdf * (rent + resale) - csf_now
    return out


def backward_price_path(
    params: HouseholdParams,
    consumption: np.ndarray,
    housing: np.ndarray,
    multiplier: np.ndarray,
    ltv_cap: np.ndarray,
    terminal_price: float,
    timing: ConstraintTiming = ConstraintTiming.CURRENT_VALUE_CURRENT_STOCK,
) -> np.ndarray:
    """Price path that satisfies the housing FOC, built by backward induction.

    Given consumption, housing, multiplier and cap paths plus the final
    price, each earlier price is the discounted next-period payoff. Only the
    variants whose collateral term involves no further-ahead price are
    supported here (current-stock timing needs p_{t+2} and is recovered by
    the same recursion; the expected-value-current-stock variant is excluded
    because its recursion is not self-contained at the boundary).
    """
    c = np.asarray(consumption, dtype=float)
    h = np.asarray(housing, dtype=float)
    mu = np.asarray(multiplier, dtype=float)
    cap = np.asarray(ltv_cap, dtype=float)
    t = c.shape[0]
    phi, delta, beta = params.house_weight, params.delta, params.beta
    p = np.empty(t)
    p[-1] = terminal_price
    for i in range(t - 2, -1, -1):
        sdf = beta * c[i] / c[i + 1]
        rent = phi / h[i + 1] * c[i + 1]
        resale = (1.0 - delta) * p[i + 1]
        if timing is ConstraintTiming.CURRENT_VALUE_CURRENT_STOCK:
            csf = mu[i + 1] * cap[i + 1] * p[i + 1] * c[i + 1]
            p[i] = sdf * (rent + csf + resale)
        elif timing is ConstraintTiming.CURRENT_VALUE_NEW_STOCK:
            base = sdf * (rent + resale)
            wedge = mu[i] * cap[i] * c[i]
            if wedge >= 1.0:
                raise CalibrationError(
                    "collateral wedge at or above one; price would be infinite"
                )
            p[i] = base / (1.0 - wedge)
        elif timing is ConstraintTiming.EXPECTED_VALUE_NEW_STOCK:
            base = sdf * (rent + resale)
            p[i] = base + mu[i] * cap[i] * p[i + 1] * c[i]
        else:
            raise CalibrationError(
                "backward induction is not self-contained for the "
                "expected-value-current-stock timing"
            )
    return p


def steady_state_price(
    rent_flow: float, beta: float, delta: float, csf_flow: float = 0.0
) -> float:
    """Stationary price: beta * (rent + csf) / (1 - beta (1 - delta))."""
    denom = 1.0 - beta * (1.0 - delta)
    if denom <= 0.0:
        raise DivergenceError("beta (1 - delta) must be below one")
    return beta * (rent_flow + csf_flow) / denom


# ---------------------------------------------------------------------------
# present-value decomposition


@dataclass(frozen=True)
class PriceDecomposition:
    """Truncated PDV of rents and collateral services, with a tail bound."""

    rent_value: float
    collateral_value: float
    truncation_bound: float
    horizon: int

    @property
    def total(self) -> float:
        return self.rent_value + self.collateral_value


def price_decomposition(
    rent_flows,
    csf_flows,
    discount_factors,
    delta: float,
    horizon: int | None = None,
) -> PriceDecomposition:
    """Decompose a price into discounted rents and collateral services.

    Entry j (0-based) of each input is the flow or one-period discount factor
    j + 1 periods ahead; the present value is

        sum_{j=1..horizon} (prod_{k<=j} m_k) (1 - delta)^(j-1) flow_j.

    Beyond the horizon all paths are treated as stationary at their final
    entries, and the geometric tail of that stationary continuation is
    reported as ``truncation_bound`` (it diverges unless m * (1 - delta) < 1).
    """
    s = np.asarray(rent_flows, dtype=float)
    f = np.asarray(csf_flows, dtype=float)
    m = np.asarray(discount_factors, dtype=float)
    if s.shape != f.shape or s.shape != m.shape or s.ndim != 1:
        raise CalibrationError("flows and discount factors must be equal-length 1-d")
    if horizon is None:
        horizon = s.shape[0]
    if not 1 <= horizon <= s.shape[0]:
        raise CalibrationError(
            f"horizon must lie in [1, {s.shape[0]}], got {horizon}"
        )
    if np.any(m <= 0.0):
        raise CalibrationError("discount factors must be positive")
    cum = np.cumprod(m[:horizon])
    decay = (1.0 - delta) ** np.arange(horizon)
    rent_value = float(np.sum(cum * decay * s[:horizon]))
    collateral_value = float(np.sum(cum * decay * f[:horizon]))

    m_tail = float(m[horizon - 1])
    q = m_tail * (1.0 - delta)
    if q >= 1.0:
        raise DivergenceError(
            f"stationary continuation does not converge: m (1 - delta) = {q}"
        )
    lead = float(cum[-1] * decay[-1]) * q / (1.0 - q)
    bound = lead * (abs(float(s[horizon - 1])) + abs(float(f[horizon - 1])))
    return PriceDecomposition(
        rent_value=rent_value,
        collateral_value=collateral_value,
        truncation_bound=bound,
        horizon=int(horizon),
    )


@dataclass(frozen=True)
class EtaEstimate:
    """Model-implied proportional price effect of legalising equity loans."""

    value: float
    underestimates: bool
    note: str


def model_implied_eta(
    csf_flows,
    discount_factors,
    delta: float,
    prelaw_price: float,
    horizon: int | None = None,
    rents_fall_with_law: bool = False,
) -> EtaEstimate:
    """Price effect of the law: discounted CSF stream over the pre-law price.

    If the law also triggers a supply response that lowers rents, the ratio
    understates the collateral option value, and the estimate is flagged as a
    lower bound.
    """
    if prelaw_price <= 0.0:
        raise CalibrationError("prelaw_price must be positive")
    f = np.asarray(csf_flows, dtype=float)
    decomp = price_decomposition(
        np.zeros_like(f), f, discount_factors, delta, horizon
    )
    value = decomp.collateral_value / prelaw_price
    note = (
        "lower bound: a post-law supply response lowers rents, so the "
        "observed price change understates the collateral value"
        if rents_fall_with_law
        else "point estimate under fixed rents"
    )
    return EtaEstimate(value=value, underestimates=rents_fall_with_law, note=note)


def csf_level_for_eta(
    target_eta: float,
    discount_factors,
    delta: float,
    prelaw_price: float,
    horizon: int | None = None,
    tol: float = 1e-14,
) -> float:
    """Invert the eta mapping: constant CSF level that matches a target.

    Solved by bisection on the (monotone) truncated present value; the
    bracket is grown geometrically until it contains the root.
    """
    if target_eta < 0.0:
        raise CalibrationError("target effect must be nonnegative")
    if target_eta == 0.0:
        return 0.0
    m = np.asarray(discount_factors, dtype=float)

    def implied(level: float) -> float:
        flows = np.full(m.shape[0], level)
        return model_implied_eta(
            flows, m, delta, prelaw_price, horizon
        ).value - target_eta

    lo, hi = 0.0, 1.0
    for _ in range(200):
        if implied(hi) > 0.0:
            break
        hi *= 2.0
    else:
        raise SolverError("could not bracket the CSF level")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if implied(mid) <= 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# own versus rent


@dataclass(frozen=True)
class OwnRentSpread:
    """Decomposition of the owner-occupied versus rental price spread."""

    spread: float
    discounted_component: float
    residual: float


def own_rent_spread(
    own_price: float,
    rent_price: float,
    sdf,
    csf_next,
    resale_next,
    delta: float,
    ownership_premium: float = 1.0,
    probs=None,
) -> OwnRentSpread:
    """Spread p_own - premium * p_rent against its model counterpart.

    The model says the spread equals E[sdf * (csf' + (1 - delta) p_own')];
    the one-period no-resale convention sets ``resale_next`` to zero.
    """
    if ownership_premium < 1.0:
        raise CalibrationError("ownership premium must be at least 1")
    sdf_v = np.asarray(sdf, dtype=float)
    csf_v = np.asarray(csf_next, dtype=float)
    resale_v = np.asarray(resale_next, dtype=float)
    spread = own_price - ownership_premium * rent_price
    component = expectation(sdf_v * (csf_v + (1.0 - delta) * resale_v), probs)
    return OwnRentSpread(
        spread=spread,
        discounted_component=component,
        residual=spread - component,
    )


# ---------------------------------------------------------------------------
# three-period purchase versus home-equity-loan problem


@dataclass(frozen=True)
class ThreePeriodProblem:
    """Three periods: buy a house with a purchase mortgage at 0, optionally
    extract equity with a home-equity loan at 1, consume the estate at 2.

    The purchase loan is capped at ``purchase_ltv_cap`` of the period-0 house
    value; total junior liens at 1 are capped at ``hel_ltv_cap`` of the
    period-1 value net of the carried purchase balance. Loans are nonnegative
    (no saving through the mortgage market) and compound at gross rate R.
    A zero ``hel_ltv_cap`` means the equity-loan market does not exist.
    """

    beta: float
    house_weight: float
    incomes: tuple[float, float, float]
    prices: tuple[float, float, float]
    gross_rate: float
    purchase_ltv_cap: float
    hel_ltv_cap: float

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise CalibrationError("beta must lie in (0, 1]")
        if self.house_weight <= 0.0:
            raise CalibrationError("house_weight must be positive")
        if min(self.prices) <= 0.0:
            raise CalibrationError("prices must be positive")
        if self.gross_rate <= 0.0:
            raise CalibrationError("gross rate must be positive")
        if self.purchase_ltv_cap < 0.0 or self.hel_ltv_cap < 0.0:
            raise CalibrationError("loan caps must be nonnegative")
        object.__setattr__(self, "incomes", tuple(float(v) for v in self.incomes))
        object.__setattr__(self, "prices", tuple(float(v) for v in self.prices))

    @property
    def has_hel_market(self) -> bool:
        """A zero cap means no home-equity loan market at all: the loan is
        identically zero and the written cap (which would also drag the
        purchase loan to zero through the carried balance) is not enforced;
        the cap multiplier then reports the shadow value of the missing
        market."""
        return self.hel_ltv_cap > 0.0


@dataclass
class ThreePeriodSolution:
    consumption: tuple[float, float, float]
    housing: float
    purchase_loan: float
    hel_loan: float
    budget_mult: tuple[float, float, float]
    purchase_cap_mult: float
    hel_cap_mult: float
    purchase_floor_mult: float
    hel_floor_mult: float
    pattern: str
    utility: float
    kkt: dict[str, float] = field(default_factory=dict)


def _consumptions(problem: ThreePeriodProblem, h, b0, b1):
    y0, y1, y2 = problem.incomes
    p0, _, p2 = problem.prices
    r = problem.gross_rate
    c0 = y0 + b0 - p0 * h
    c1 = y1 + b1
    c2 = y2 + p2 * h - r * r * b0 - r * b1
    return c0, c1, c2


def _utility(problem: ThreePeriodProblem, h, b0, b1):
    c0, c1, c2 = _consumptions(problem, h, b0, b1)
    if min(c0, c1, c2, h) <= 0.0:
        return -np.inf
    b = problem.beta
    phi = problem.house_weight
    return (
        np.log(c0)
        + phi * (1.0 + b) * np.log(h)
        + b * np.log(c1)
        + b * b * np.log(c2)
    )


def _lambdas(problem: ThreePeriodProblem, c0, c1, c2):
    b = problem.beta
    return 1.0 / c0, b / c1, b * b / c2


def _stationarity(problem, h, b0, b1, mu0, mu1, nu0=0.0, nu1=0.0):
    """The three stationarity equations of the Lagrangian."""
    p0, p1, p2 = problem.prices
    r = problem.gross_rate
    phi = problem.house_weight
    b = problem.beta
    c0, c1, c2 = _consumptions(problem, h, b0, b1)
    l0, l1, l2 = _lambdas(problem, c0, c1, c2)
    hel_b0_coef = r if problem.has_hel_market else 0.0
    g_h = (
        (1.0 + b) * phi / h
        - l0 * p0
        + l2 * p2
        + mu0 * problem.purchase_ltv_cap * p0
        + mu1 * problem.hel_ltv_cap * p1
    )
    g_b0 = l0 - l2 * r * r - mu0 - mu1 * hel_b0_coef + nu0
    g_b1 = l1 - l2 * r - mu1 + nu1
    return g_h, g_b0, g_b1


_PATTERNS = (
    "both_caps",
    "purchase_cap_only",
    "hel_cap_only",
    "no_caps",
    "no_hel_loan_purchase_cap",
    "no_hel_loan",
    "hel_exhausted",
    "no_purchase_loan_hel_cap",
    "no_purchase_loan",
    "no_loans",
)


def _pattern_setup(problem: ThreePeriodProblem, pattern: str):
    """Free variables and the reduced map var-vector -> (h, b0, b1)."""
    p0, p1, _ = problem.prices
    r = problem.gross_rate
    kpm = problem.purchase_ltv_cap
    khel = problem.hel_ltv_cap

    if pattern == "both_caps":
        return ["h"], lambda v: (
            v[0],
            kpm * p0 * v[0],
            khel * p1 * v[0] - r * kpm * p0 * v[0],
        )
    if pattern == "purchase_cap_only":
        return ["h", "b1"], lambda v: (v[0], kpm * p0 * v[0], v[1])
    if pattern == "hel_cap_only":
        return ["h", "b0"], lambda v: (v[0], v[1], khel * p1 * v[0] - r * v[1])
    if pattern == "no_caps":
        return ["h", "b0", "b1"], lambda v: (v[0], v[1], v[2])
    if pattern == "no_hel_loan_purchase_cap":
        return ["h"], lambda v: (v[0], kpm * p0 * v[0], 0.0)
    if pattern == "no_hel_loan":
        return ["h", "b0"], lambda v: (v[0], v[1], 0.0)
    if pattern == "hel_exhausted":
        # no equity draw, yet the written cap binds: the carried purchase
        # balance alone exhausts it, so r*b0 = khel*p1*h pins b0
        return ["h"], lambda v: (v[0], khel * p1 * v[0] / r, 0.0)
    if pattern == "no_purchase_loan_hel_cap":
        return ["h"], lambda v: (v[0], 0.0, khel * p1 * v[0])
    if pattern == "no_purchase_loan":
        return ["h", "b1"], lambda v: (v[0], 0.0, v[1])
    if pattern == "no_loans":
        return ["h"], lambda v: (v[0], 0.0, 0.0)
    raise SolverError(f"unknown pattern {pattern!r}")


def _pattern_multipliers(problem, pattern, h, b0, b1):
    """Multipliers implied by the stationarity equations under the pattern.

    Returns (mu0, mu1, nu0, nu1). Cap multipliers of binding constraints are
    read off the loan FOCs; floor multipliers of loans pinned at zero absorb
    whatever the loan FOC leaves over.
    """
    r = problem.gross_rate
    c0, c1, c2 = _consumptions(problem, h, b0, b1)
    l0, l1, l2 = _lambdas(problem, c0, c1, c2)
    mu0 = mu1 = nu0 = nu1 = 0.0
    if pattern == "both_caps":
        mu1 = l1 - l2 * r
        mu0 = l0 - l2 * r * r - mu1 * r
    elif pattern == "purchase_cap_only":
        mu0 = l0 - l2 * r * r
    elif pattern == "hel_cap_only":
        mu1 = l1 - l2 * r
    elif pattern == "no_caps":
        pass
    elif pattern == "no_hel_loan_purchase_cap":
        nu1 = l2 * r - l1
        mu0 = l0 - l2 * r * r
    elif pattern == "no_hel_loan":
        nu1 = l2 * r - l1
    elif pattern == "hel_exhausted":
        mu1 = (l0 - l2 * r * r) / r
        nu1 = mu1 + l2 * r - l1
    elif pattern == "no_purchase_loan_hel_cap":
        mu1 = l1 - l2 * r
        nu0 = l2 * r * r + mu1 * r - l0
    elif pattern == "no_purchase_loan":
        nu0 = l2 * r * r - l0
    elif pattern == "no_loans":
        nu0 = l2 * r * r - l0
        nu1 = l2 * r - l1
    if not problem.has_hel_market:
        wedge = l1 - l2 * r
        mu1 = max(0.0, wedge)
        nu1 = max(0.0, -wedge)
    return mu0, mu1, nu0, nu1


def _pattern_residuals(problem, pattern, free, to_vars):
    """Residual function for the pattern's free variables."""

    def fn(v):
        h, b0, b1 = to_vars(v)
        c0, c1, c2 = _consumptions(problem, h, b0, b1)
        if min(h, c0, c1, c2) <= 0.0:
            return None
        mu0, mu1, nu0, nu1 = _pattern_multipliers(problem, pattern, h, b0, b1)
        g_h, g_b0, g_b1 = _stationarity(problem, h, b0, b1, mu0, mu1, nu0, nu1)
        full = {"h": g_h, "b0": g_b0, "b1": g_b1}
        return np.array([full[name] for name in free])

    return fn


def _feasible_seed(problem, pattern, free, to_vars, n_grid=60):
    """Coarse feasible starting point: best reduced utility on a grid."""
    y_total = sum(problem.incomes)
    h_max = 5.0 * y_total / min(problem.prices)
    h_grid = np.geomspace(1e-4 * h_max, h_max, n_grid)
    b_scale = 2.0 * y_total
    best = None
    if len(free) == 1:
        candidates = (np.array([h]) for h in h_grid)
    elif len(free) == 2:
        b_grid = np.linspace(0.0, b_scale, 16)
        candidates = (np.array([h, b]) for h in h_grid for b in b_grid)
    else:
        b_grid = np.linspace(0.0, b_scale, 9)
        candidates = (
            np.array([h, b0, b1])
            for h in h_grid
            for b0 in b_grid
            for b1 in b_grid
        )
    for v in candidates:
        h, b0, b1 = to_vars(v)
        if min(b0, b1) < 0.0:
            continue
        u = _utility(problem, h, b0, b1)
        if np.isfinite(u) and (best is None or u > best[0]):
            best = (u, v)
    return None if best is None else best[1]


def _solve_pattern(problem, pattern):
    free, to_vars = _pattern_setup(problem, pattern)
    res_fn = _pattern_residuals(problem, pattern, free, to_vars)
    seed = _feasible_seed(problem, pattern, free, to_vars)
    if seed is None:
        return None, "no feasible point"

    def guarded(v):
        out = res_fn(v)
        if out is None:
            return np.full(len(free), 1e6)
        return out

    candidates: list[np.ndarray] = []
    if len(free) == 1:
        roots = _solve_1d(res_fn, seed[0])
        if not roots:
            return None, "no root bracketed"
        candidates = [np.array([root]) for root in roots]
    else:
        result = scipy.optimize.root(guarded, seed, method="hybr", tol=1e-13)
        if not result.success and np.max(np.abs(result.fun)) > 1e-9:
            return None, f"root finder failed: {result.message}"
        candidates = [result.x]
    best = None
    for vec in candidates:
        resid = res_fn(vec)
        if resid is None or np.max(np.abs(resid)) > 1e-8:
            continue
        if best is None or np.max(np.abs(resid)) < np.max(np.abs(res_fn(best))):
            best = vec
    if best is None:
        return None, "stationarity residuals too large"
    return best, None


def _solve_1d(res_fn, seed):
    """All sign-change roots of the single stationarity equation.

    Scans a wide geometric grid around the seed, skips infeasible points and
    polishes each bracketed sign change with Brent's method.
    """

    def value(h):
        out = res_fn(np.array([h]))
        return None if out is None else float(out[0])

    grid = seed * np.geomspace(1e-3, 1e3, 1500)
    values = [value(h) for h in grid]
    roots = []
    for i in range(len(grid) - 1):
        a, b = values[i], values[i + 1]
        if a is None or b is None:
            continue
        if a == 0.0:
            roots.append(float(grid[i]))
            continue
        if np.sign(a) != np.sign(b):
            root = scipy.optimize.brentq(
                lambda x: value(x), grid[i], grid[i + 1], xtol=1e-15, rtol=1e-15
            )
            roots.append(float(root))
    return roots


def solve_three_period(problem: ThreePeriodProblem) -> ThreePeriodSolution:
    """Enumerate constraint-activity patterns and return the KKT point.

    The four cap-activity patterns (each cap binding or slack) are tried
    first, then the loan-at-zero corner patterns. Every candidate is checked
    against the full KKT system: stationarity, primal and dual feasibility,
    and complementary slackness. If several patterns pass (a boundary case),
    the one with the highest utility wins; if none passes a
    :class:`~pricelab.errors.SolverError` reports per-pattern diagnostics.

    A zero HEL cap removes the equity-loan market: only the no-HEL patterns
    are meaningful there, and the written cap constraint (which would drag
    the purchase loan into the period-1 cap) is not enforced.
    """
    diagnostics: dict[str, str] = {}
    accepted: list[ThreePeriodSolution] = []
    no_hel_market = problem.hel_ltv_cap == 0.0
    patterns = (
        ("no_hel_loan_purchase_cap", "no_hel_loan", "no_loans")
        if no_hel_market
        else _PATTERNS
    )
    for pattern in patterns:
        vec, fail = _solve_pattern(problem, pattern)
        if vec is None:
            diagnostics[pattern] = fail
            continue
        free, to_vars = _pattern_setup(problem, pattern)
        h, b0, b1 = to_vars(vec)
        candidate = _package_solution(problem, pattern, h, b0, b1, no_hel_market)
        if candidate is None:
            diagnostics[pattern] = "KKT check failed"
            continue
        worst = max(abs(v) for k, v in candidate.kkt.items() if k.startswith("stat_"))
        feas = min(
            candidate.kkt["slack_purchase_cap"],
            candidate.kkt["slack_hel_cap"],
            candidate.purchase_loan,
            candidate.hel_loan,
            candidate.purchase_cap_mult,
            candidate.hel_cap_mult,
            candidate.purchase_floor_mult,
            candidate.hel_floor_mult,
        )
        if worst <= 1e-8 and feas >= -1e-9:
            accepted.append(candidate)
        else:
            diagnostics[pattern] = (
                f"stationarity {worst:.2e}, feasibility {feas:.2e}"
            )
    if not accepted:
        raise SolverError(
            "no constraint-activity pattern yields a KKT point",
            diagnostics=diagnostics,
        )
    return max(accepted, key=lambda s: s.utility)


def _package_solution(problem, pattern, h, b0, b1, no_hel_market):
    c0, c1, c2 = _consumptions(problem, h, b0, b1)
    if min(h, c0, c1, c2) <= 0.0:
        return None
    l0, l1, l2 = _lambdas(problem, c0, c1, c2)
    mu0, mu1, nu0, nu1 = _pattern_multipliers(problem, pattern, h, b0, b1)
    g_h, g_b0, g_b1 = _stationarity(problem, h, b0, b1, mu0, mu1, nu0, nu1)
    p0, p1, _ = problem.prices
    r = problem.gross_rate
    slack0 = problem.purchase_ltv_cap * p0 * h - b0
    if no_hel_market:
        slack1 = -b1
    else:
        slack1 = problem.hel_ltv_cap * p1 * h - r * b0 - b1
    kkt = {
        "stat_h": g_h,
        "stat_purchase_loan": g_b0,
        "stat_hel_loan": g_b1,
        "slack_purchase_cap": slack0,
        "slack_hel_cap": slack1,
        "comp_purchase_cap": mu0 * slack0,
        "comp_hel_cap": mu1 * slack1,
        "comp_purchase_floor": nu0 * b0,
        "comp_hel_floor": nu1 * b1,
    }
    return ThreePeriodSolution(
        consumption=(c0, c1, c2),
        housing=h,
        purchase_loan=b0,
        hel_loan=b1,
        budget_mult=(l0, l1, l2),
        purchase_cap_mult=mu0,
        hel_cap_mult=mu1,
        purchase_floor_mult=nu0,
        hel_floor_mult=nu1,
        pattern=pattern,
        utility=_utility(problem, h, b0, b1),
        kkt=kkt,
    )


def housing_foc_terms(solution: ThreePeriodSolution, problem: ThreePeriodProblem):
    """Sides of the housing FOC: marginal cost vs utility + collateral + resale.

    Returns (cost, benefit) where cost = lambda0 * p0 and benefit is the sum
    of the marginal housing utility, the purchase and equity-loan collateral
    terms, and the discounted resale value. Equal at a solution.
    """
    p0, p1, p2 = problem.prices
    phi = problem.house_weight
    b = problem.beta
    l0, _, l2 = solution.budget_mult
    cost = l0 * p0
    benefit = (
        (1.0 + b) * phi / solution.housing
        + solution.purchase_cap_mult * problem.purchase_ltv_cap * p0
        + solution.hel_cap_mult * problem.hel_ltv_cap * p1
        + l2 * p2
    )
    return cost, benefit


def lagrangian_gradient(
    solution: ThreePeriodSolution, problem: ThreePeriodProblem
) -> dict[str, float]:
    """Analytic gradient of the full Lagrangian at the solution.

    Variables are (c0, c1, c2, h, purchase_loan, hel_loan) with the budget
    multipliers attached to the three budget identities and the cap/floor
    multipliers fixed at their solved values. All entries are zero at a KKT
    point.
    """
    c0, c1, c2 = solution.consumption
    l0, l1, l2 = solution.budget_mult
    b = problem.beta
    phi = problem.house_weight
    p0, p1, p2 = problem.prices
    r = problem.gross_rate
    mu0, mu1 = solution.purchase_cap_mult, solution.hel_cap_mult
    nu0, nu1 = solution.purchase_floor_mult, solution.hel_floor_mult
    hel_b0_coef = r if problem.has_hel_market else 0.0
    return {
        "c0": 1.0 / c0 - l0,
        "c1": b / c1 - l1,
        "c2": b * b / c2 - l2,
        "h": (
            (1.0 + b) * phi / solution.housing
            - l0 * p0
            + l2 * p2
            + mu0 * problem.purchase_ltv_cap * p0
            + mu1 * problem.hel_ltv_cap * p1
        ),
        "purchase_loan": l0 - l2 * r * r - mu0 - mu1 * hel_b0_coef + nu0,
        "hel_loan": l1 - l2 * r - mu1 + nu1,
    }


def lagrangian_gradient_fd(
    solution: ThreePeriodSolution,
    problem: ThreePeriodProblem,
    step: float = 1e-5,
) -> dict[str, float]:
    """Central finite-difference gradient of the same Lagrangian."""
    y0, y1, y2 = problem.incomes
    p0, p1, p2 = problem.prices
    r = problem.gross_rate
    b = problem.beta
    phi = problem.house_weight
    l0, l1, l2 = solution.budget_mult
    mu0, mu1 = solution.purchase_cap_mult, solution.hel_cap_mult
    nu0, nu1 = solution.purchase_floor_mult, solution.hel_floor_mult
    base = np.array(
        [
            *solution.consumption,
            solution.housing,
            solution.purchase_loan,
            solution.hel_loan,
        ]
    )

    def lagrangian(v):
        c0, c1, c2, h, b0, b1 = v
        utility = (
            np.log(c0)
            + phi * (1.0 + b) * np.log(h)
            + b * np.log(c1)
            + b * b * np.log(c2)
        )
        if problem.has_hel_market:
            hel_slack = problem.hel_ltv_cap * p1 * h - r * b0 - b1
        else:
            hel_slack = -b1
        return (
            utility
            - l0 * (c0 + p0 * h - b0 - y0)
            - l1 * (c1 - b1 - y1)
            - l2 * (c2 + r * r * b0 + r * b1 - p2 * h - y2)
            + mu0 * (problem.purchase_ltv_cap * p0 * h - b0)
            + mu1 * hel_slack
            + nu0 * b0
            + nu1 * b1
        )

    names = ("c0", "c1", "c2", "h", "purchase_loan", "hel_loan")
    out = {}
    for i, name in enumerate(names):
        up = base.copy()
        dn = base.copy()
        up[i] += step
        dn[i] -= step
        out[name] = (lagrangian(up) - lagrangian(dn)) / (2.0 * step)
    return out
