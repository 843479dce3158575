"""Sandwich variance estimators for absorbed WLS fits.

All estimators share one bread, the inverse weighted cross-product from the
fit, and differ only in the meat built from the weighted score vectors
s_i = w_i * e_i * x_i:

- classical:  sigma^2 * (X'WX)^-1
- hc:         sum_i s_i s_i'
- cluster:    sum_g (sum_{i in g} s_i)(...)'  with a G/(G-1)*(N-1)/(N-K) factor
- two_way:    V_A + V_B - V_{A intersect B}, repaired to PSD if needed
- spatial:    double sum over same-year pairs with a distance kernel

The spatial kernel treats dependence as contemporaneous: only observation
pairs from the same year enter the double sum, so a zero cutoff collapses to
the HC estimator exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import InferenceError
from .regress import RegressionFit

EARTH_RADIUS_KM = 6371.0088

KERNELS = ("uniform", "bartlett")
KINDS = ("classical", "hc", "cluster", "two_way", "spatial")


@dataclass(frozen=True)
class VariancePlan:
    """A recipe for one variance estimate.

    ``dims`` names cluster dimensions: either FE dimensions declared on the
    dataset or plain columns. ``small_sample`` is "cluster" (the default for
    clustered kinds) or "none".
    """

    kind: str
    dims: tuple[str, ...] = ()
    cutoff_km: float = 100.0
    kernel: str = "bartlett"
    small_sample: str | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InferenceError(f"unknown variance kind {self.kind!r}")
        if self.kind == "cluster" and len(self.dims) != 1:
            raise InferenceError("cluster plan needs exactly one dimension")
        if self.kind == "two_way" and len(self.dims) != 2:
            raise InferenceError("two_way plan needs exactly two dimensions")
        if self.kind == "spatial":
            if self.kernel not in KERNELS:
                raise InferenceError(f"unknown spatial kernel {self.kernel!r}")
            if self.cutoff_km < 0:
                raise InferenceError("spatial cutoff must be nonnegative")
        object.__setattr__(self, "dims", tuple(self.dims))

    @property
    def display_label(self) -> str:
        if self.label:
            return self.label
        if self.kind == "cluster":
            return f"cluster({self.dims[0]})"
        if self.kind == "two_way":
            return f"two_way({self.dims[0]},{self.dims[1]})"
        if self.kind == "spatial":
            return f"spatial({self.kernel},{self.cutoff_km:g}km)"
        return self.kind

    # convenience constructors ------------------------------------------------

    @staticmethod
    def classical(**kw) -> "VariancePlan":
        return VariancePlan(kind="classical", **kw)

    @staticmethod
    def hc(**kw) -> "VariancePlan":
        return VariancePlan(kind="hc", **kw)

    @staticmethod
    def cluster(dim: str, **kw) -> "VariancePlan":
        return VariancePlan(kind="cluster", dims=(dim,), **kw)

    @staticmethod
    def two_way(dim_a: str, dim_b: str, **kw) -> "VariancePlan":
        return VariancePlan(kind="two_way", dims=(dim_a, dim_b), **kw)

    @staticmethod
    def spatial(cutoff_km: float = 100.0, kernel: str = "bartlett", **kw) -> "VariancePlan":
        return VariancePlan(kind="spatial", cutoff_km=cutoff_km, kernel=kernel, **kw)


@dataclass
class VarianceResult:
    plan: VariancePlan
    label: str
    cov: np.ndarray
    se: dict[str, float]
    n_clusters: dict[str, int]
    psd_adjusted: bool
    dof_test: float

    def se_for(self, name: str) -> float:
        return self.se[name]


def great_circle_km(lat1, lon1, lat2, lon2) -> np.ndarray | float:
    """Great-circle distance in kilometres (haversine, spherical Earth)."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=float)) for v in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    a = np.clip(a, 0.0, 1.0)
    out = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a))
    return out if out.ndim else float(out)


def _scores(fit: RegressionFit) -> np.ndarray:
    return (fit.weights * fit.residuals)[:, None] * fit.design


def _cluster_codes(fit: RegressionFit, dim: str) -> tuple[np.ndarray, int]:
    ds = fit.dataset
    if dim in ds.fe_dims:
        return ds.group_codes(dim)
    if dim in ds.frame.columns:
        codes, uniques = pd.factorize(ds.frame[dim], sort=False)
        return codes.astype(np.int64), len(uniques)
    raise InferenceError(f"cluster dimension {dim!r} is neither a declared FE nor a column")


def _cluster_meat(scores: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    k = scores.shape[1]
    sums = np.zeros((n_groups, k))
    for j in range(k):
        sums[:, j] = np.bincount(codes, weights=scores[:, j], minlength=n_groups)
    return sums.T @ sums


def _small_sample_factor(fit: RegressionFit, n_groups: int) -> float:
    n = fit.n_obs
    k_model = fit.rank + fit.absorbed_params
    if n_groups <= 1 or n - k_model <= 0:
        raise InferenceError(
            f"cannot apply cluster small-sample factor with G={n_groups}, "
            f"N={n}, K={k_model}"
        )
    return (n_groups / (n_groups - 1.0)) * ((n - 1.0) / (n - k_model))


def _repair_psd(cov: np.ndarray) -> tuple[np.ndarray, bool]:
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() >= 0.0:
        return cov, False
    clipped = np.clip(eigvals, 0.0, None)
    return (eigvecs * clipped) @ eigvecs.T, True


def _spatial_meat(fit: RegressionFit, plan: VariancePlan) -> np.ndarray:
    ds = fit.dataset
    for col in ("lat", "lon"):
        if col not in ds.frame.columns:
            raise InferenceError("spatial plan needs lat/lon columns on the dataset")
    lat = ds.frame["lat"].to_numpy(dtype=float)
    lon = ds.frame["lon"].to_numpy(dtype=float)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise InferenceError("spatial plan needs finite coordinates on every row")
    scores = _scores(fit)
    years = ds.frame["year"].to_numpy()
    meat = np.zeros((scores.shape[1], scores.shape[1]))
    for year in np.unique(years):
        idx = np.flatnonzero(years == year)
        s = scores[idx]
        d = great_circle_km(
            lat[idx][:, None], lon[idx][:, None], lat[idx][None, :], lon[idx][None, :]
        )
        if plan.cutoff_km == 0.0:
            kmat = (d == 0.0).astype(float)
        elif plan.kernel == "uniform":
            kmat = (d <= plan.cutoff_km).astype(float)
        else:
            kmat = np.clip(1.0 - d / plan.cutoff_km, 0.0, None)
        meat += s.T @ (kmat @ s)
    return meat


def vcov(fit: RegressionFit, plan: VariancePlan) -> VarianceResult:
    """Evaluate one variance plan on a fit."""
    bread = fit.xtwx_inv
    psd_adjusted = False
    n_clusters: dict[str, int] = {}
    dof_test = float(fit.dof)

    if plan.kind == "classical":
        sigma2 = float(np.sum(fit.weights * fit.residuals**2)) / fit.dof
        cov = sigma2 * bread
    elif plan.kind == "hc":
        s = _scores(fit)
        cov = bread @ (s.T @ s) @ bread
    elif plan.kind == "cluster":
        s = _scores(fit)
        codes, g = _cluster_codes(fit, plan.dims[0])
        if g < 2:
            raise InferenceError(
                f"clustering on {plan.dims[0]!r} found {g} cluster(s); need >= 2"
            )
        meat = _cluster_meat(s, codes, g)
        if (plan.small_sample or "cluster") == "cluster":
            meat = meat * _small_sample_factor(fit, g)
        cov = bread @ meat @ bread
        n_clusters[plan.dims[0]] = g
        dof_test = float(g - 1)
    elif plan.kind == "two_way":
        s = _scores(fit)
        codes_a, ga = _cluster_codes(fit, plan.dims[0])
        codes_b, gb = _cluster_codes(fit, plan.dims[1])
        if min(ga, gb) < 2:
            raise InferenceError(
                f"two-way clustering on {plan.dims} found ({ga}, {gb}) "
                "clusters; need >= 2 in each dimension"
            )
        inter = codes_a.astype(np.int64) * (codes_b.max() + 1) + codes_b
        codes_ab, gab = pd.factorize(inter, sort=False)[0], len(np.unique(inter))
        meats = []
        for codes, g in ((codes_a, ga), (codes_b, gb), (codes_ab.astype(np.int64), gab)):
            m = _cluster_meat(s, codes, g)
            if (plan.small_sample or "cluster") == "cluster":
                m = m * _small_sample_factor(fit, g)
            meats.append(m)
        meat = meats[0] + meats[1] - meats[2]
        cov = bread @ meat @ bread
        cov, psd_adjusted = _repair_psd(cov)
        n_clusters[plan.dims[0]] = ga
        n_clusters[plan.dims[1]] = gb
        n_clusters["intersection"] = gab
        dof_test = float(min(ga, gb) - 1)
    elif plan.kind == "spatial":
        meat = _spatial_meat(fit, plan)
        cov = bread @ meat @ bread
        cov, psd_adjusted = _repair_psd(cov)
        dof_test = float("inf")
    else:  # pragma: no cover - guarded by the plan validator
        raise InferenceError(f"unknown variance kind {plan.kind!r}")

    diag = np.diag(cov)
    if np.any(diag < -1e-12):
        raise InferenceError("variance estimate has a negative diagonal")
    se = dict(zip(fit.names, np.sqrt(np.clip(diag, 0.0, None))))
    return VarianceResult(
        plan=plan,
        label=plan.display_label,
        cov=cov,
        se=se,
        n_clusters=n_clusters,
        psd_adjusted=psd_adjusted,
        dof_test=dof_test,
    )


@dataclass
class MaxSeReport:
    """Per-coefficient max standard error across plans, with provenance."""

    terms: tuple[str, ...]
    results: tuple[VarianceResult, ...]
    max_se: dict[str, float]
    source: dict[str, str]

    def to_frame(self) -> pd.DataFrame:
        data = {"term": list(self.terms)}
        for res in self.results:
            data[f"se_{res.label}"] = [res.se[t] for t in self.terms]
        data["se_max"] = [self.max_se[t] for t in self.terms]
        data["se_source"] = [self.source[t] for t in self.terms]
        return pd.DataFrame(data)


def max_se_report(fit: RegressionFit, plans: Sequence[VariancePlan]) -> MaxSeReport:
    """Evaluate every plan and report the largest SE per coefficient.

    Ties keep the earliest plan in the given order, so the report is
    deterministic. A single plan passes through unchanged.
    """
    if not plans:
        raise InferenceError("max_se_report needs at least one plan")
    labels = [p.display_label for p in plans]
    if len(set(labels)) != len(labels):
        raise InferenceError(f"variance plan labels must be unique, got {labels}")
    results = tuple(vcov(fit, p) for p in plans)
    max_se: dict[str, float] = {}
    source: dict[str, str] = {}
    for term in fit.names:
        best = results[0].se[term]
        best_label = results[0].label
        for res in results[1:]:
            if res.se[term] > best:
                best = res.se[term]
                best_label = res.label
        max_se[term] = best
        source[term] = best_label
    return MaxSeReport(terms=fit.names, results=results, max_se=max_se, source=source)
