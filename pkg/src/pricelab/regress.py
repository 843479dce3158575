"""Weighted least squares with high-dimensional fixed-effect absorption.

Fixed effects are absorbed by alternating weighted within-group demeaning
(method of alternating projections) rather than by materialising dummy
columns, so designs with thousands of unit effects stay cheap. The demeaned
regression is then solved by pivoted QR with explicit rank handling:
collinear columns are dropped with a warning, never silently aliased.

Determinism: all reductions run over the dataset's canonical row order using
numpy's deterministic summation, so coefficients are bit-for-bit reproducible
across runs, row permutations of the source data, and thread counts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import DesignError, EmptyDesignError, SchemaError
from .panel import PanelDataset

DEMEAN_TOL = 1e-10
DEMEAN_MAX_ITER = 10_000


class DroppedColumnWarning(UserWarning):
    """A rank-deficient design column was dropped from the fit."""


# ---------------------------------------------------------------------------
# term language


class Term:
    """A named piece of the design matrix; expands to numeric columns."""

    def expand(self, ds: PanelDataset) -> list[tuple[str, np.ndarray]]:
        raise NotImplementedError


@dataclass(frozen=True)
class Column(Term):
    """A raw numeric column."""

    name: str

    def expand(self, ds):
        return [(self.name, ds.column(self.name).astype(float))]


@dataclass(frozen=True)
class Constant(Term):
    def expand(self, ds):
        return [("const", np.ones(len(ds)))]


@dataclass(frozen=True)
class Indicator(Term):
    """1 when ``column`` equals ``value``."""

    column: str
    value: object
    label: str | None = None

    def expand(self, ds):
        name = self.label if self.label is not None else f"{self.column}={self.value}"
        return [(name, (ds.column(self.column) == self.value).astype(float))]


@dataclass(frozen=True)
class FromYear(Term):
    """1 for years at or after ``year`` (a post-treatment indicator)."""

    year: int
    label: str = "Post"

    def expand(self, ds):
        return [(self.label, (ds.column("year") >= self.year).astype(float))]


@dataclass(frozen=True)
class Trend(Term):
    """Linear time trend, years since the first observed year (or origin)."""

    origin: int | None = None
    label: str = "trend"

    def expand(self, ds):
        years = ds.column("year").astype(float)
        origin = float(self.origin) if self.origin is not None else float(years.min())
        return [(self.label, years - origin)]


@dataclass(frozen=True)
class DummySet(Term):
    """One indicator column per level of a categorical column."""

    column: str

    def expand(self, ds):
        values = ds.column(self.column)
        levels = sorted(set(values.tolist()))
        return [
            (f"{self.column}={lvl}", (values == lvl).astype(float)) for lvl in levels
        ]


@dataclass(frozen=True)
class Interaction(Term):
    """Product of factor terms; dummy-set factors distribute."""

    factors: tuple[Term, ...]
    label: str | None = None

    def __init__(self, *factors: Term, label: str | None = None):
        object.__setattr__(self, "factors", tuple(factors))
        object.__setattr__(self, "label", label)

    def expand(self, ds):
        parts = [f.expand(ds) for f in self.factors]
        out = parts[0]
        for nxt in parts[1:]:
            out = [
                (f"{na} × {nb}", va * vb) for na, va in out for nb, vb in nxt
            ]
        if self.label is not None:
            if len(out) != 1:
                raise DesignError("label override needs a single-column interaction")
            out = [(self.label, out[0][1])]
        return out


@dataclass(frozen=True)
class DesignSpec:
    """What to regress on what, with which absorptions and weights.

    ``absorb`` lists fixed-effect dimensions declared on the dataset. When no
    dimension is absorbed an intercept is added automatically (suppress with
    ``add_intercept=False``).
    """

    response: str
    terms: tuple[Term, ...]
    absorb: tuple[str, ...] = ()
    weight_column: str | None = "weight"
    add_intercept: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "absorb", tuple(self.absorb))


@dataclass
class Design:
    """Expanded numeric design, ready for absorption and solving."""

    names: list[str]
    response: np.ndarray
    matrix: np.ndarray
    weights: np.ndarray
    absorb_codes: list[np.ndarray]
    absorb_levels: dict[str, int]


def build_design(ds: PanelDataset, spec: DesignSpec) -> Design:
    """Expand spec terms against the dataset and validate the design."""
    if spec.response not in ds.frame.columns:
        raise SchemaError(f"response column {spec.response!r} not in dataset")
    for dim in spec.absorb:
        if dim not in ds.fe_dims:
            raise DesignError(f"cannot absorb undeclared FE dimension {dim!r}")
    absorbed_cols = {
        ds.fe_dims[dim][0] for dim in spec.absorb if len(ds.fe_dims[dim]) == 1
    }
    terms = list(spec.terms)
    for term in terms:
        for factor in _leaf_terms(term):
            if isinstance(factor, DummySet) and factor.column in absorbed_cols:
                raise DesignError(
                    f"dummy set for {factor.column!r} is collinear with the "
                    f"absorbed dimension; drop one or the other"
                )
    add_const = spec.add_intercept
    if add_const is None:
        add_const = not spec.absorb
    if add_const:
        terms = [Constant()] + terms

    names: list[str] = []
    columns: list[np.ndarray] = []
    for term in terms:
        for name, values in term.expand(ds):
            if name in names:
                raise DesignError(f"duplicate design column {name!r}")
            names.append(name)
            columns.append(np.asarray(values, dtype=float))
    if not names:
        raise EmptyDesignError("design has no regressors")

    if spec.weight_column is None:
        w = np.ones(len(ds))
    else:
        w = ds.column(spec.weight_column).astype(float)

    codes = []
    levels = {}
    for dim in spec.absorb:
        c, k = ds.group_codes(dim)
        codes.append(c)
        levels[dim] = k

    return Design(
        names=names,
        response=ds.column(spec.response).astype(float),
        matrix=np.column_stack(columns) if columns else np.empty((len(ds), 0)),
        weights=w,
        absorb_codes=codes,
        absorb_levels=levels,
    )


def _leaf_terms(term: Term):
    if isinstance(term, Interaction):
        for f in term.factors:
            yield from _leaf_terms(f)
    else:
        yield term


# ---------------------------------------------------------------------------
# absorption


def absorb_fixed_effects(
    matrix: np.ndarray,
    weights: np.ndarray,
    groups: Sequence[np.ndarray],
    tol: float = DEMEAN_TOL,
    max_iter: int = DEMEAN_MAX_ITER,
) -> tuple[np.ndarray, int, bool]:
    """Weighted within-group demeaning, alternating over group structures.

    Repeatedly sweeps the group structures, each time removing weighted group
    means from every column, until the largest applied adjustment in a full
    sweep falls below ``tol`` relative to each column's initial scale.

    Returns (demeaned copy, sweeps used, converged flag). Zero group
    structures return the input unchanged (identity projection).
    """
    z = np.array(matrix, dtype=float, copy=True)
    if z.ndim == 1:
        z = z[:, None]
    if not groups:
        return z, 0, True
    w = np.asarray(weights, dtype=float)
    wsum_total = w.sum()
    scale = np.sqrt((w[:, None] * z * z).sum(axis=0) / wsum_total)
    scale[scale == 0] = 1.0
    counts = [np.bincount(g, weights=w) for g in groups]

    def remaining_means():
        worst = 0.0
        for g, wg in zip(groups, counts):
            for j in range(z.shape[1]):
                means = np.bincount(g, weights=w * z[:, j]) / wg
                worst = max(worst, np.max(np.abs(means)) / scale[j])
        return worst

    for sweep in range(1, max_iter + 1):
        for g, wg in zip(groups, counts):
            for j in range(z.shape[1]):
                means = np.bincount(g, weights=w * z[:, j]) / wg
                z[:, j] -= means[g]
        if remaining_means() <= tol:
            return z, sweep, True
    return z, max_iter, False


def _absorbed_param_count(groups, levels: dict[str, int]) -> int:
    """Estimable absorbed parameters, with the usual two-way graph correction.

    The first dimension contributes all its levels; the second contributes its
    levels minus the number of connected components of the bipartite graph the
    first two dimensions form (each component carries one redundancy); any
    further dimension contributes levels - 1.
    """
    level_list = list(levels.values())
    if not level_list:
        return 0
    total = level_list[0]
    if len(level_list) >= 2:
        comps = _n_components(groups[0], groups[1], level_list[0], level_list[1])
        total += level_list[1] - comps
    for extra in level_list[2:]:
        total += extra - 1
    return total


def _n_components(a: np.ndarray, b: np.ndarray, ka: int, kb: int) -> int:
    parent = np.arange(ka + kb)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    for u, v in zip(a, ka + b):
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[rv] = ru
    roots = {find(i) for i in range(ka + kb)}
    return len(roots)


# ---------------------------------------------------------------------------
# fitting


@dataclass
class RegressionFit:
    """A solved weighted least-squares fit on absorbed data.

    Holds everything the variance estimators need: the demeaned design, the
    weights, residuals aligned to the dataset's canonical row order, and the
    inverse weighted cross-product (the sandwich bread).
    """

    names: tuple[str, ...]
    coef: np.ndarray
    dropped: tuple[str, ...]
    residuals: np.ndarray
    design: np.ndarray
    weights: np.ndarray
    xtwx_inv: np.ndarray
    n_obs: int
    rank: int
    absorbed_levels: dict[str, int]
    absorbed_params: int
    dof: int
    converged: bool
    iterations: int
    dataset: PanelDataset = field(repr=False)
    spec: DesignSpec = field(repr=False)

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, self.coef))

    def coefficient(self, name: str) -> float:
        try:
            return self.coefficients[name]
        except KeyError:
            raise KeyError(
                f"no coefficient {name!r}; kept {list(self.names)}, "
                f"dropped {list(self.dropped)}"
            ) from None


def fit_wls(ds: PanelDataset, spec: DesignSpec) -> RegressionFit:
    """Fit the design by weighted least squares after FE absorption.

    Raises
    ------
    EmptyDesignError
        If every regressor is absorbed or collinear (nothing estimable).
    ConvergenceError is never raised here: non-convergence of the demeaning
    sweep is reported through ``converged`` so callers can decide.
    """
    design = build_design(ds, spec)
    n, k = design.matrix.shape
    stacked = np.column_stack([design.response, design.matrix])
    demeaned, iterations, converged = absorb_fixed_effects(
        stacked, design.weights, design.absorb_codes
    )
    y = demeaned[:, 0]
    x = demeaned[:, 1:]
    w = design.weights
    sw = np.sqrt(w)

    xw = x * sw[:, None]
    yw = y * sw
    q, r, piv = scipy.linalg.qr(xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r)) if min(xw.shape) else np.array([])
    if diag.size == 0 or diag[0] == 0.0:
        raise EmptyDesignError(
            "all regressors were absorbed by the fixed effects; nothing to fit"
        )
    tol = diag[0] * max(n, k) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    kept = np.sort(piv[:rank])
    dropped = tuple(design.names[i] for i in np.sort(piv[rank:]))
    if dropped:
        warnings.warn(
            f"dropped rank-deficient design columns: {list(dropped)}",
            DroppedColumnWarning,
            stacklevel=2,
        )
    xk = x[:, kept]
    xwk = xw[:, kept]
    qk, rk = np.linalg.qr(xwk)
    coef = scipy.linalg.solve_triangular(rk, qk.T @ yw)
    rinv = scipy.linalg.solve_triangular(rk, np.eye(rank))
    xtwx_inv = rinv @ rinv.T
    residuals = y - xk @ coef

    absorbed_params = _absorbed_param_count(design.absorb_codes, design.absorb_levels)
    dof = n - rank - absorbed_params
    if dof <= 0:
        raise DesignError(
            f"no residual degrees of freedom: n={n}, rank={rank}, "
            f"absorbed={absorbed_params}"
        )

    return RegressionFit(
        names=tuple(design.names[i] for i in kept),
        coef=coef,
        dropped=dropped,
        residuals=residuals,
        design=xk,
        weights=w,
        xtwx_inv=xtwx_inv,
        n_obs=n,
        rank=rank,
        absorbed_levels=design.absorb_levels,
        absorbed_params=absorbed_params,
        dof=dof,
        converged=converged,
        iterations=iterations,
        dataset=ds,
        spec=spec,
    )
