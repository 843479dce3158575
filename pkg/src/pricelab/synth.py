"""Elastic-net synthetic control.

A treated series is matched in the pre-treatment window by an affine
combination of control series: intercept plus weights, with an elastic-net
penalty on the weights only,

    || y_pre - mu - X_pre w ||^2  +  penalty * ( l1_ratio * ||w||_1
                                               + (1 - l1_ratio) * ||w||_2^2 ).

The solve is plain cyclic coordinate descent with soft thresholding; the
intercept is refit each sweep and never penalised. The objective is checked to
be non-increasing after every sweep, which catches update-rule mistakes
immediately. Gaps (treated minus synthetic) are reported for every year, and
post-period gaps averaged over years (and, for several treated units, over
fits) estimate the treatment effect. Placebo refits on the untreated pool give
a rank-based randomisation p-value.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    CalibrationError,
    ConvergenceError,
    CrossValidationError,
    DesignError,
)
from .panel import PanelDataset

CD_TOL = 1e-10
CD_MAX_SWEEPS = 100_000

#: Default cross-validation grid.
PENALTY_GRID = tuple(10.0**k for k in range(-4, 3))
L1_RATIO_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def default_grid() -> tuple[tuple[float, float], ...]:
    """The default (penalty, l1_ratio) grid, 7 x 5 points."""
    return tuple(product(PENALTY_GRID, L1_RATIO_GRID))


@dataclass(frozen=True)
class SynthProblem:
    """One treated unit, its control pool, and the pre/post split.

    The columns of ``controls_pre``/``controls_post`` are control outcome
    series; the trailing ``n_extra`` columns are auxiliary predictor series on
    their own scale (they are standardised to the control-outcome scale before
    fitting, and the fitted weights are folded back to raw units).
    """

    treated_pre: np.ndarray
    treated_post: np.ndarray
    controls_pre: np.ndarray
    controls_post: np.ndarray
    control_names: tuple[str, ...]
    pre_years: tuple[int, ...]
    post_years: tuple[int, ...]
    n_extra: int = 0
    treated_name: str = "treated"

    def __post_init__(self):
        tp = np.asarray(self.treated_pre, dtype=float)
        ta = np.asarray(self.treated_post, dtype=float)
        cp = np.asarray(self.controls_pre, dtype=float)
        ca = np.asarray(self.controls_post, dtype=float)
        object.__setattr__(self, "treated_pre", tp)
        object.__setattr__(self, "treated_post", ta)
        object.__setattr__(self, "controls_pre", cp)
        object.__setattr__(self, "controls_post", ca)
        object.__setattr__(self, "control_names", tuple(self.control_names))
        object.__setattr__(self, "pre_years", tuple(int(y) for y in self.pre_years))
        object.__setattr__(self, "post_years", tuple(int(y) for y in self.post_years))
        if cp.ndim != 2 or ca.ndim != 2:
            raise DesignError("control matrices must be 2-d (years x series)")
        if len(self.control_names) != cp.shape[1] or ca.shape[1] != cp.shape[1]:
            raise DesignError("control names and matrix columns disagree")
        if len(self.pre_years) != tp.shape[0] or cp.shape[0] != tp.shape[0]:
            raise AlignmentError("pre-period years, treated and controls disagree")
        if len(self.post_years) != ta.shape[0] or ca.shape[0] != ta.shape[0]:
            raise AlignmentError("post-period years, treated and controls disagree")
        if tp.shape[0] < 2:
            raise DesignError("need at least two pre-period years to fit")
        if not 0 <= self.n_extra < cp.shape[1]:
            raise DesignError("n_extra must leave at least one outcome column")
        if len(set(self.control_names)) != len(self.control_names):
            raise DesignError("control names must be unique")

    @property
    def n_outcomes(self) -> int:
        return self.controls_pre.shape[1] - self.n_extra


@dataclass
class SynthFit:
    """A fitted synthetic control: intercept, weights, and per-year gaps."""

    intercept: float
    weights: np.ndarray
    control_names: tuple[str, ...]
    penalty: float
    l1_ratio: float
    gaps: dict[int, float]
    pre_years: tuple[int, ...]
    post_years: tuple[int, ...]
    pre_rmse: float
    objective: float
    n_sweeps: int
    treated_name: str = "treated"

    @property
    def post_mean_gap(self) -> float:
        return float(np.mean([self.gaps[y] for y in self.post_years]))

    def weight_map(self) -> dict[str, float]:
        return dict(zip(self.control_names, self.weights))


def _coordinate_descent(y, x, penalty, l1_ratio, tol, max_sweeps, w0=None):
    """Minimise the elastic-net objective; returns (mu, w, sweeps, objective).

    Raises ConvergenceError with the objective trace if the sweep budget is
    exhausted, and if the objective ever increases between sweeps (which a
    correct update rule cannot do beyond roundoff).

    The unpenalised intercept is profiled out (for any w the optimum is
    mu = mean(y - x w)), and the sweeps run on precomputed Gram products so a
    sweep costs O(k^2) instead of O(n k) numpy calls. ``w0`` warm-starts the
    weights (used by the cross-validation penalty path).
    """
    n, k = x.shape
    y_bar = float(y.mean())
    x_bar = x.mean(axis=0)
    yc = y - y_bar
    xc = x - x_bar
    gram_np = xc.T @ xc
    w_np = np.zeros(k) if w0 is None else np.asarray(w0, dtype=float)

    # plain-float state: the sweep loop is pure python, numpy call overhead
    # on length-k vectors would dominate it otherwise
    gram = gram_np.tolist()
    xty = (xc.T @ yc).tolist()
    y_ssq = float(yc @ yc)
    col_ssq = [gram[j][j] for j in range(k)]
    ridge = penalty * (1.0 - l1_ratio)
    denom = [col_ssq[j] + ridge for j in range(k)]
    gamma = penalty * l1_ratio / 2.0
    w = [float(v) for v in w_np]
    gw = (gram_np @ w_np).tolist()

    def objective():
        ssr = y_ssq - 2.0 * _dot(w, xty) + _dot(w, gw)
        pen_l1 = sum(v if v >= 0.0 else -v for v in w)
        pen = penalty * (l1_ratio * pen_l1 + (1.0 - l1_ratio) * _dot(w, w))
        return (ssr if ssr > 0.0 else 0.0) + pen

    indices = range(k)
    trace = [objective()]
    for sweep in range(1, max_sweeps + 1):
        delta = 0.0
        for j in indices:
            dj = denom[j]
            if dj == 0.0:
                continue
            wj = w[j]
            rho = xty[j] - gw[j] + col_ssq[j] * wj
            if rho > gamma:
                new_wj = (rho - gamma) / dj
            elif rho < -gamma:
                new_wj = (rho + gamma) / dj
            else:
                new_wj = 0.0
            step = new_wj - wj
            if step != 0.0:
                row = gram[j]
                for m in indices:
                    gw[m] += row[m] * step
                step = abs(step)
                if step > delta:
                    delta = step
                w[j] = new_wj
        if sweep % 64 == 0:
            gw = (gram_np @ np.asarray(w)).tolist()  # flush roundoff drift
        obj = objective()
        if obj > trace[-1] * (1.0 + 1e-10) + 1e-14:
            raise ConvergenceError(
                f"objective increased on sweep {sweep}: {trace[-1]} -> {obj}",
                trace=trace + [obj],
            )
        trace.append(obj)
        if delta <= tol:
            w_out = np.asarray(w)
            return y_bar - float(x_bar @ w_out), w_out, sweep, obj
    raise ConvergenceError(
        f"coordinate descent did not converge in {max_sweeps} sweeps "
        f"(last update {delta:g})",
        trace=trace,
    )


def _dot(a, b):
    return sum(u * v for u, v in zip(a, b))


def _standardise_extras(pre: np.ndarray, n_extra: int, names=None):
    """Map extra predictor columns onto the control-outcome scale.

    Returns the transformed pre matrix plus per-column (scale, shift) so
    fitted weights can be folded back to raw units:
    z = a * xraw + b with a = sd_out / sd_col, b = m_out - a * m_col.
    """
    pre = np.array(pre, dtype=float, copy=True)
    k = pre.shape[1]
    scale = np.ones(k)
    shift = np.zeros(k)
    if n_extra == 0:
        return pre, scale, shift
    n_outcomes = k - n_extra
    out_block = pre[:, :n_outcomes]
    m_out = float(out_block.mean())
    s_out = float(out_block.std())
    if s_out == 0.0:
        s_out = 1.0
    for j in range(n_outcomes, k):
        col = pre[:, j]
        s_col = float(col.std())
        if s_col == 0.0:
            label = names[j] if names is not None else f"column {j}"
            raise DesignError(
                f"extra predictor {label!r} is constant over the pre-period; "
                "cannot scale it"
            )
        a = s_out / s_col
        b = m_out - a * float(col.mean())
        scale[j] = a
        shift[j] = b
        pre[:, j] = a * col + b
    return pre, scale, shift


def fit_synth(
    problem: SynthProblem,
    penalty: float,
    l1_ratio: float,
    tol: float = CD_TOL,
    max_sweeps: int = CD_MAX_SWEEPS,
) -> SynthFit:
    """Fit the elastic-net synthetic control at one grid point."""
    if penalty < 0:
        raise CalibrationError("penalty must be nonnegative")
    if not 0.0 <= l1_ratio <= 1.0:
        raise CalibrationError("l1_ratio must lie in [0, 1]")
    cp, scale, shift = _standardise_extras(
        problem.controls_pre, problem.n_extra, problem.control_names
    )
    mu_std, w_std, sweeps, obj = _coordinate_descent(
        problem.treated_pre, cp, penalty, l1_ratio, tol, max_sweeps
    )
    # fold the standardisation back into raw-unit weights and intercept
    weights = w_std * scale
    intercept = mu_std + float(w_std @ shift)

    gaps: dict[int, float] = {}
    synth_pre = intercept + problem.controls_pre @ weights
    for year, actual, fitted in zip(problem.pre_years, problem.treated_pre, synth_pre):
        gaps[year] = float(actual - fitted)
    synth_post = intercept + problem.controls_post @ weights
    for year, actual, fitted in zip(problem.post_years, problem.treated_post, synth_post):
        gaps[year] = float(actual - fitted)
    pre_rmse = float(
        np.sqrt(np.mean([(gaps[y]) ** 2 for y in problem.pre_years]))
    )
    return SynthFit(
        intercept=intercept,
        weights=weights,
        control_names=problem.control_names,
        penalty=penalty,
        l1_ratio=l1_ratio,
        gaps=gaps,
        pre_years=problem.pre_years,
        post_years=problem.post_years,
        pre_rmse=pre_rmse,
        objective=obj,
        n_sweeps=sweeps,
        treated_name=problem.treated_name,
    )


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CvResult:
    penalty: float
    l1_ratio: float
    table: tuple[tuple[float, float, float], ...]  # (penalty, l1_ratio, avg mse)
    n_fit_years: int
    n_validation_years: int


def cross_validate(
    controls_pre: np.ndarray,
    grid: Iterable[tuple[float, float]] | None = None,
    n_extra: int = 0,
) -> CvResult:
    """Choose (penalty, l1_ratio) by pseudo-treated cross-validation.

    Each control outcome series in turn plays the treated unit against the
    remaining columns; fits use the first three quarters of the pre-period
    years and are scored by mean squared prediction error on the final
    quarter. The grid point with the lowest average MSE wins; exact ties
    prefer the smaller penalty, then the larger l1_ratio.
    """
    x = np.asarray(controls_pre, dtype=float)
    if x.ndim != 2:
        raise CrossValidationError("controls_pre must be 2-d")
    t0, k = x.shape
    n_outcomes = k - n_extra
    if n_outcomes < 2:
        raise CrossValidationError(
            "cross-validation needs at least two control outcome series"
        )
    if n_extra > 0:
        # put auxiliary predictors on the control-outcome scale, as the real
        # fit will, so the penalty means the same thing here
        x, _, _ = _standardise_extras(x, n_extra)
    n_val = max(1, t0 // 4)
    n_fit = t0 - n_val
    if n_fit < 2:
        raise CrossValidationError(
            f"pre-period too short to split for validation ({t0} years)"
        )
    points = tuple(grid) if grid is not None else default_grid()
    if not points:
        raise CrossValidationError("empty cross-validation grid")

    # fit each pseudo-treated unit along a descending penalty path per
    # l1_ratio, warm-starting from the previous solution: the small-penalty
    # fits are ill-conditioned and converge far faster from a neighbour
    paths: dict[float, list[float]] = {}
    for penalty, l1_ratio in points:
        paths.setdefault(float(l1_ratio), [])
        if float(penalty) not in paths[float(l1_ratio)]:
            paths[float(l1_ratio)].append(float(penalty))
    for pens in paths.values():
        pens.sort(reverse=True)

    sq_err: dict[tuple[float, float], float] = {}
    for j in range(n_outcomes):
        others = [c for c in range(k) if c != j]
        y_fit = x[:n_fit, j]
        x_fit = x[:n_fit][:, others]
        x_val = x[n_fit:][:, others]
        y_val = x[n_fit:, j]
        for l1_ratio, pens in paths.items():
            w_prev = None
            for penalty in pens:
                mu, w, _, _ = _coordinate_descent(
                    y_fit, x_fit, penalty, l1_ratio, CD_TOL, CD_MAX_SWEEPS,
                    w0=w_prev,
                )
                w_prev = w
                mse = float(np.mean((y_val - (mu + x_val @ w)) ** 2))
                key = (penalty, l1_ratio)
                sq_err[key] = sq_err.get(key, 0.0) + mse

    rows = [
        (float(p), float(r), sq_err[(float(p), float(r))] / n_outcomes)
        for p, r in points
    ]
    best = min(rows, key=lambda r: (r[2], r[0], -r[1]))
    return CvResult(
        penalty=best[0],
        l1_ratio=best[1],
        table=tuple(rows),
        n_fit_years=n_fit,
        n_validation_years=n_val,
    )


# ---------------------------------------------------------------------------
# effect paths and placebos


@dataclass
class TreatmentPath:
    """Per-year average gap across one or more fits."""

    years: tuple[int, ...]
    avg_gap: dict[int, float]
    post_years: tuple[int, ...]
    n_fits: int

    @property
    def post_mean(self) -> float:
        return float(np.mean([self.avg_gap[y] for y in self.post_years]))


def treatment_path(fits: Sequence[SynthFit]) -> TreatmentPath:
    """Average gap paths across fits (several treated units, equal weights)."""
    if not fits:
        raise AlignmentError("treatment_path needs at least one fit")
    years = fits[0].pre_years + fits[0].post_years
    for f in fits[1:]:
        if f.pre_years + f.post_years != years or f.post_years != fits[0].post_years:
            raise AlignmentError("fits cover different year labels; cannot average")
    avg = {
        y: float(np.mean([f.gaps[y] for f in fits])) for y in years
    }
    return TreatmentPath(
        years=years,
        avg_gap=avg,
        post_years=fits[0].post_years,
        n_fits=len(fits),
    )


@dataclass
class PlaceboSuite:
    """Placebo fits of every untreated unit, for randomisation inference."""

    unit_names: tuple[str, ...]
    fits: tuple[SynthFit, ...]
    post_mean_gaps: dict[str, float]

    @property
    def placebo_mean(self) -> float:
        return float(np.mean(list(self.post_mean_gaps.values())))

    def p_value(self, treated_post_mean: float) -> float:
        """Rank-based randomisation p-value for a treated post-mean gap."""
        placebo = np.abs(np.array(list(self.post_mean_gaps.values())))
        n_ge = int(np.sum(placebo >= abs(treated_post_mean)))
        return (1.0 + n_ge) / (len(placebo) + 1.0)


# ---------------------------------------------------------------------------
# panel integration


def problem_from_panel(
    ds: PanelDataset,
    treated_unit: str,
    control_units: Sequence[str] | None = None,
    outcome: str = "outcome",
    extra_columns: Sequence[str] = (),
) -> SynthProblem:
    """Build a :class:`SynthProblem` from a panel dataset.

    ``extra_columns`` name year-level covariates (constant within year) to
    append as auxiliary predictor series. Units must be observed in every
    year; holes raise an alignment error.
    """
    if ds.treatment_year is None:
        raise DesignError("dataset needs treatment_year for the pre/post split")
    if ds.is_stacked:
        raise DesignError("synthetic control runs on unstacked data")
    frame = ds.frame
    years = [int(y) for y in np.sort(frame["year"].unique())]
    pre_years = tuple(y for y in years if y < ds.treatment_year)
    post_years = tuple(y for y in years if y >= ds.treatment_year)
    if len(pre_years) < 2:
        raise DesignError("need at least two pre-treatment years")

    wide = frame.pivot(index="year", columns="unit", values=outcome).sort_index()
    if wide.isna().any().any():
        holes = sorted(wide.columns[wide.isna().any()].tolist())
        raise AlignmentError(f"units with missing years: {holes}")
    if treated_unit not in wide.columns:
        raise DesignError(f"treated unit {treated_unit!r} not in dataset")
    if control_units is None:
        control_units = [u for u in wide.columns if u != treated_unit]
    control_units = list(control_units)
    if treated_unit in control_units:
        raise DesignError("treated unit cannot be its own control")

    pre_mask = wide.index < ds.treatment_year
    post_mask = ~pre_mask
    controls_pre = wide.loc[pre_mask, control_units].to_numpy(dtype=float)
    controls_post = wide.loc[post_mask, control_units].to_numpy(dtype=float)
    names = list(control_units)

    for col in extra_columns:
        series = frame.groupby("year")[col].agg(["min", "max", "mean"]).sort_index()
        if not np.allclose(series["min"], series["max"], rtol=0, atol=0):
            raise DesignError(
                f"extra column {col!r} varies within years; synthetic control "
                "predictors must be year-level series"
            )
        values = series["mean"].to_numpy(dtype=float)
        controls_pre = np.column_stack([controls_pre, values[pre_mask]])
        controls_post = np.column_stack([controls_post, values[post_mask]])
        names.append(col)

    return SynthProblem(
        treated_pre=wide.loc[pre_mask, treated_unit].to_numpy(dtype=float),
        treated_post=wide.loc[post_mask, treated_unit].to_numpy(dtype=float),
        controls_pre=controls_pre,
        controls_post=controls_post,
        control_names=tuple(names),
        pre_years=pre_years,
        post_years=post_years,
        n_extra=len(extra_columns),
        treated_name=treated_unit,
    )


def fit_all_treated(
    ds: PanelDataset,
    grid: Iterable[tuple[float, float]] | None = None,
    outcome: str = "outcome",
    extra_columns: Sequence[str] = (),
) -> tuple[tuple[SynthFit, ...], TreatmentPath, CvResult]:
    """Fit every treated unit with one CV-chosen grid point; average paths.

    Cross-validation runs once over the untreated pool, the chosen
    (penalty, l1_ratio) is reused for each treated unit's fit, and gap paths
    are averaged with equal weights.
    """
    if ds.treatment_state is None:
        raise DesignError("dataset needs treatment_state set")
    states = ds.frame.drop_duplicates("unit").set_index("unit")["state"]
    treated_units = sorted(states.index[states == ds.treatment_state])
    control_units = sorted(states.index[states != ds.treatment_state])
    if not treated_units:
        raise DesignError("no treated units found")
    if len(control_units) < 2:
        raise DesignError("need at least two control units")
    probe = problem_from_panel(
        ds, treated_units[0], control_units, outcome, extra_columns
    )
    cv = cross_validate(probe.controls_pre, grid, n_extra=probe.n_extra)
    fits = tuple(
        fit_synth(
            problem_from_panel(ds, unit, control_units, outcome, extra_columns),
            cv.penalty,
            cv.l1_ratio,
        )
        for unit in treated_units
    )
    return fits, treatment_path(fits), cv


def placebo_suite(
    ds: PanelDataset,
    grid: Iterable[tuple[float, float]] | None = None,
    outcome: str = "outcome",
    extra_columns: Sequence[str] = (),
) -> PlaceboSuite:
    """Run every untreated unit through the full pipeline as pseudo-treated.

    Each placebo run cross-validates on the remaining untreated units and
    fits the pseudo-treated series with its own chosen grid point.
    """
    if ds.treatment_state is None:
        raise DesignError("dataset needs treatment_state set")
    states = ds.frame.drop_duplicates("unit").set_index("unit")["state"]
    pool = sorted(states.index[states != ds.treatment_state])
    if len(pool) < 3:
        raise DesignError("placebo suite needs at least three untreated units")
    fits = []
    for unit in pool:
        rest = [u for u in pool if u != unit]
        problem = problem_from_panel(ds, unit, rest, outcome, extra_columns)
        cv = cross_validate(problem.controls_pre, grid, n_extra=problem.n_extra)
        fits.append(fit_synth(problem, cv.penalty, cv.l1_ratio))
    post_means = {u: f.post_mean_gap for u, f in zip(pool, fits)}
    return PlaceboSuite(
        unit_names=tuple(pool),
        fits=tuple(fits),
        post_mean_gaps=post_means,
    )
