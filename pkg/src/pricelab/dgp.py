"""Synthetic panel generators with stored ground truth.

Every generator returns both a :class:`~pricelab.panel.PanelDataset` and a
truth object holding the exact per-row decomposition of the outcome
(baseline, unit and year effects, trends, confounds, treatment effect,
noise). The error component is stored as the realised residual
``outcome - signal``, so ``signal + error`` reproduces the outcome bit for
bit and estimator bias can be measured against the exact injected effect.

Randomness comes from one :class:`numpy.random.Generator` per call, consumed
in a fixed documented order (unit effects, year effects, exposures, trend
slopes, oil series and loadings, then noise last). Changing the error
specification therefore never shifts the draws of the structural components,
and replication streams split from a root seed via
:func:`numpy.random.SeedSequence.spawn` are independent of scheduling order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import ConfigError
from .infer import great_circle_km
from .panel import PanelDataset

#: Cap on the number of units for the dense spatial-covariance factorisation.
SPATIAL_CHOLESKY_LIMIT = 2000

_EFFECT_KINDS = ("none", "constant", "dynamic", "heterogeneous")
_ERROR_KINDS = ("iid", "clustered", "ar1", "spatial")


@dataclass(frozen=True)
class EffectSpec:
    """Treatment effect injected into treated-state rows from the law year on.

    kind
        ``none`` no effect; ``constant`` adds ``size`` to every treated post
        row; ``dynamic`` adds the per-year amounts in ``per_year`` (years not
        listed get zero); ``heterogeneous`` adds ``at_zero + slope * exposure``
        using each unit's exposure draw.
    """

    kind: str = "constant"
    size: float = 0.0
    per_year: tuple[tuple[int, float], ...] = ()
    at_zero: float = 0.0
    slope: float = 0.0
    exposure_low: float = 0.5
    exposure_high: float = 2.5

    def __post_init__(self):
        if self.kind not in _EFFECT_KINDS:
            raise ConfigError(
                f"effect kind must be one of {_EFFECT_KINDS}, got {self.kind!r}"
            )
        if self.exposure_low >= self.exposure_high:
            raise ConfigError("exposure_low must be below exposure_high")


@dataclass(frozen=True)
class ErrorSpec:
    """Noise process for the outcome.

    ``iid`` draws one normal per row; ``clustered`` adds a shared
    (group, year) shock with standard deviation ``cluster_sd`` on top of the
    idiosyncratic part; ``ar1`` makes the draw serially correlated within each
    unit (stationary AR(1) with coefficient ``rho`` and marginal standard
    deviation ``sd``); ``spatial`` draws, year by year, from a Gaussian
    process over unit locations with covariance sd^2 exp(-d / range_km).
    """

    kind: str = "iid"
    sd: float = 0.02
    cluster_sd: float = 0.01
    cluster_dim: str = "state"
    rho: float = 0.5
    range_km: float = 80.0

    def __post_init__(self):
        if self.kind not in _ERROR_KINDS:
            raise ConfigError(
                f"error kind must be one of {_ERROR_KINDS}, got {self.kind!r}"
            )
        if self.sd < 0 or self.cluster_sd < 0:
            raise ConfigError("noise standard deviations must be nonnegative")
        if self.cluster_dim not in ("state", "county", "unit"):
            raise ConfigError("cluster_dim must be state, county or unit")
        if not -1.0 < self.rho < 1.0:
            raise ConfigError("rho must lie strictly inside (-1, 1)")
        if self.range_km <= 0:
            raise ConfigError("range_km must be positive")


@dataclass(frozen=True)
class ConfoundSpec:
    """Non-treatment structure that a naive comparison would absorb.

    ``oil_loading_sd`` scales metro-level loadings on a common random-walk
    series (exposes estimators to a shared trending regressor);
    ``unit_trend_sd`` scales per-unit linear time trends.
    """

    oil_loading_sd: float = 0.0
    unit_trend_sd: float = 0.0


@dataclass(frozen=True)
class DgpConfig:
    """Panel layout and signal calibration.

    Units are laid out on a km grid, one block per state, so distances are
    meaningful for spatial errors. The treated state keeps the configured
    name; control states are numbered. Outcomes sit on a log-price-like scale
    around ``base_outcome``.
    """

    n_states: int = 15
    counties_per_state: int = 1
    units_per_county: int = 5
    start_year: int = 1992
    end_year: int = 2004
    treatment_year: int = 1998
    treatment_state: str = "Texas"
    base_outcome: float = 2.0
    unit_sd: float = 0.15
    year_sd: float = 0.05
    effect: EffectSpec = field(default_factory=EffectSpec)
    errors: ErrorSpec = field(default_factory=ErrorSpec)
    confounds: ConfoundSpec = field(default_factory=ConfoundSpec)
    grid_spacing_km: float = 35.0
    county_gap_km: float = 120.0
    state_gap_km: float = 400.0

    def __post_init__(self):
        if self.n_states < 2:
            raise ConfigError("need at least two states")
        if self.counties_per_state < 1 or self.units_per_county < 1:
            raise ConfigError("counties and units per county must be positive")
        if not self.start_year < self.treatment_year <= self.end_year:
            raise ConfigError(
                "treatment_year must lie inside the (start_year, end_year] span"
            )

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.start_year, self.end_year + 1)

    @property
    def n_units(self) -> int:
        return self.n_states * self.counties_per_state * self.units_per_county


@dataclass(frozen=True)
class GroundTruth:
    """Exact decomposition of generated outcomes, row-aligned to the dataset.

    ``components`` has one row per dataset row in the same canonical order,
    with columns baseline, unit_effect, year_effect, trend, confound,
    treatment_effect, signal, error and outcome; ``signal + error`` equals
    ``outcome`` exactly. ``exposure`` maps units to their heterogeneity draw.
    """

    config: DgpConfig
    components: pd.DataFrame
    exposure: pd.Series

    @property
    def static_effect(self) -> float:
        """The injected constant effect (zero for kind none/dynamic)."""
        if self.config.effect.kind == "constant":
            return self.config.effect.size
        if self.config.effect.kind == "none":
            return 0.0
        raise ConfigError(
            f"no single static effect for kind {self.config.effect.kind!r}"
        )

    @property
    def dynamic_effects(self) -> dict[int, float]:
        if self.config.effect.kind != "dynamic":
            raise ConfigError("dynamic_effects needs effect kind 'dynamic'")
        return {int(y): float(v) for y, v in self.config.effect.per_year}

    def decomposition_gap(self) -> float:
        """Largest violation of signal + error == outcome (zero by design)."""
        c = self.components
        return float(
            np.max(np.abs(c["signal"].to_numpy() + c["error"].to_numpy()
                          - c["outcome"].to_numpy()))
        )


def _unit_layout(config: DgpConfig):
    """Unit, county, state labels and km-grid coordinates."""
    states = [config.treatment_state] + [
        f"S{i:02d}" for i in range(1, config.n_states)
    ]
    rows = []
    for s_idx, state in enumerate(states):
        for c_idx in range(config.counties_per_state):
            county = f"{state}-C{c_idx}"
            for u_idx in range(config.units_per_county):
                x = (
                    s_idx * config.state_gap_km
                    + (u_idx % 3) * config.grid_spacing_km
                )
                y = (
                    c_idx * config.county_gap_km
                    + (u_idx // 3) * config.grid_spacing_km
                )
                rows.append((f"{county}-U{u_idx:02d}", county, state, x, y))
    frame = pd.DataFrame(rows, columns=["unit", "county", "state", "x", "y"])
    # place the km grid on the globe around (30N, 100W)
    frame["lat"] = 30.0 + frame["y"] / 110.574
    frame["lon"] = -100.0 + frame["x"] / (111.320 * np.cos(np.radians(30.0)))
    return frame


def _draw_errors(config: DgpConfig, units: pd.DataFrame, rng) -> np.ndarray:
    """Noise matrix (n_units, n_years) under the configured process."""
    spec = config.errors
    n_units = len(units)
    n_years = config.years.shape[0]
    if spec.kind == "iid":
        return spec.sd * rng.standard_normal((n_units, n_years))
    if spec.kind == "clustered":
        labels = units[spec.cluster_dim].to_numpy()
        _, codes = np.unique(labels, return_inverse=True)
        shared = spec.cluster_sd * rng.standard_normal((codes.max() + 1, n_years))
        idio = spec.sd * rng.standard_normal((n_units, n_years))
        return idio + shared[codes, :]
    if spec.kind == "ar1":
        # stationary AR(1) within each unit, marginal variance sd^2
        innov = rng.standard_normal((n_units, n_years))
        out = np.empty((n_units, n_years))
        scale = spec.sd * math.sqrt(1.0 - spec.rho**2)
        out[:, 0] = spec.sd * innov[:, 0]
        for t in range(1, n_years):
            out[:, t] = spec.rho * out[:, t - 1] + scale * innov[:, t]
        return out
    # spatial Gaussian process, independent across years
    if n_units > SPATIAL_CHOLESKY_LIMIT:
        raise ConfigError(
            f"spatial errors factorise a dense {n_units}x{n_units} covariance; "
            f"limit is {SPATIAL_CHOLESKY_LIMIT} units"
        )
    lat = units["lat"].to_numpy()
    lon = units["lon"].to_numpy()
    dist = np.empty((n_units, n_units))
    for i in range(n_units):
        dist[i, :] = great_circle_km(lat[i], lon[i], lat, lon)
    cov = spec.sd**2 * np.exp(-dist / spec.range_km)
    cov[np.diag_indices_from(cov)] += 1e-12 * max(spec.sd**2, 1.0)
    chol = np.linalg.cholesky(cov)
    return chol @ rng.standard_normal((n_units, n_years))


def generate(config: DgpConfig, seed) -> tuple[PanelDataset, GroundTruth]:
    """Generate a balanced state panel with known ground truth.

    ``seed`` may be an int or a :class:`numpy.random.SeedSequence`; replication
    studies should pass children from :func:`replicate_seeds`.
    """
    rng = np.random.default_rng(seed)
    units = _unit_layout(config)
    years = config.years
    n_units, n_years = len(units), years.shape[0]

    # fixed draw order; see module docstring
    unit_effect = config.unit_sd * rng.standard_normal(n_units)
    year_effect = config.year_sd * rng.standard_normal(n_years)
    exposure = rng.uniform(
        config.effect.exposure_low, config.effect.exposure_high, n_units
    )
    trend_slope = config.confounds.unit_trend_sd * rng.standard_normal(n_units)
    oil_series = np.cumsum(0.1 * rng.standard_normal(n_years))
    oil_loading = config.confounds.oil_loading_sd * rng.standard_normal(
        config.n_states
    )
    noise = _draw_errors(config, units, rng)

    year_mid = float(years.mean())
    treated_unit = (units["state"] == config.treatment_state).to_numpy()
    state_codes = pd.factorize(units["state"], sort=False)[0]

    effect_spec = config.effect
    per_year = dict(effect_spec.per_year)

    records = []
    comps = []
    for i in range(n_units):
        for t, year in enumerate(years):
            base = config.base_outcome
            trend = trend_slope[i] * (year - year_mid)
            confound = oil_loading[state_codes[i]] * oil_series[t]
            treated_post = treated_unit[i] and year >= config.treatment_year
            if not treated_post or effect_spec.kind == "none":
                eff = 0.0
            elif effect_spec.kind == "constant":
                eff = effect_spec.size
            elif effect_spec.kind == "dynamic":
                eff = per_year.get(int(year), 0.0)
            else:
                eff = effect_spec.at_zero + effect_spec.slope * exposure[i]
            signal = (
                base + unit_effect[i] + year_effect[t] + trend + confound + eff
            )
            outcome = signal + noise[i, t]
            error = outcome - signal
            records.append(
                (
                    units["unit"].iat[i],
                    units["county"].iat[i],
                    units["state"].iat[i],
                    units["state"].iat[i],
                    int(year),
                    outcome,
                    units["lat"].iat[i],
                    units["lon"].iat[i],
                    exposure[i],
                    oil_series[t],
                )
            )
            comps.append(
                (
                    base,
                    unit_effect[i],
                    year_effect[t],
                    trend,
                    confound,
                    eff,
                    signal,
                    error,
                    outcome,
                )
            )

    frame = pd.DataFrame(
        records,
        columns=[
            "unit", "county", "msa", "state", "year", "outcome",
            "lat", "lon", "exposure", "oil",
        ],
    )
    components = pd.DataFrame(
        comps,
        columns=[
            "baseline", "unit_effect", "year_effect", "trend",
            "confound", "treatment_effect", "signal", "error", "outcome",
        ],
    )
    ds = PanelDataset(
        frame=frame,
        covariates=("exposure", "oil"),
        treatment_state=config.treatment_state,
        treatment_year=config.treatment_year,
        log_columns=frozenset({"outcome"}),
    )
    # the dataset sorts rows canonically; realign the truth to match
    order = ds.frame.index.to_numpy()
    components = components.iloc[order].reset_index(drop=True)
    truth = GroundTruth(
        config=config,
        components=components,
        exposure=pd.Series(exposure, index=units["unit"].to_numpy()),
    )
    return ds, truth


def replicate_seeds(root_seed: int, n: int) -> list[np.random.SeedSequence]:
    """Independent child seeds for replication r = 0 .. n-1.

    Child r is a deterministic function of (root_seed, r) alone, so parallel
    replications give identical results no matter how work is scheduled.
    """
    return np.random.SeedSequence(root_seed).spawn(n)


# ---------------------------------------------------------------------------
# donor-pool generator for synthetic-control studies


@dataclass(frozen=True)
class SynthDgpConfig:
    """Donor pool whose treated unit is an exact affine mix plus noise.

    The treated outcome is ``intercept + sum_d weight_d * control_d`` over the
    designated donors, plus iid noise, plus ``effect`` from the treatment
    year on. With ``noise_sd = 0`` the treated unit lies exactly in the
    affine span of its donors.
    """

    n_controls: int = 8
    n_pre: int = 12
    n_post: int = 4
    start_year: int = 1986
    effect: float = 0.0458
    noise_sd: float = 0.01
    n_donors: int = 2
    intercept: float = 0.05
    ar_coef: float = 0.8
    level_sd: float = 0.3
    shock_sd: float = 0.08
    base_level: float = 2.0

    def __post_init__(self):
        if self.n_controls < 2:
            raise ConfigError("need at least two control units")
        if self.n_pre < 2 or self.n_post < 1:
            raise ConfigError("need at least two pre years and one post year")
        if not 1 <= self.n_donors <= self.n_controls:
            raise ConfigError("n_donors must lie in [1, n_controls]")
        if not 0.0 <= self.ar_coef < 1.0:
            raise ConfigError("ar_coef must lie in [0, 1)")

    @property
    def treatment_year(self) -> int:
        return self.start_year + self.n_pre

    @property
    def years(self) -> np.ndarray:
        return np.arange(self.start_year, self.start_year + self.n_pre + self.n_post)


@dataclass(frozen=True)
class SynthTruth:
    """Donor identities, true weights, intercept and injected effect."""

    donor_names: tuple[str, ...]
    donor_weights: tuple[float, ...]
    intercept: float
    effect: float
    treated_name: str

    def weight_vector(self, control_names) -> np.ndarray:
        """True weights aligned to an arbitrary control ordering."""
        lookup = dict(zip(self.donor_names, self.donor_weights))
        return np.array([lookup.get(name, 0.0) for name in control_names])


def generate_synth_panel(
    config: SynthDgpConfig, seed
) -> tuple[PanelDataset, SynthTruth]:
    """Panel with one treated unit built from a sparse donor combination.

    Control outcomes load on a small set of common AR(1) factors (plus a unit
    level and a little idiosyncratic noise), so any one series is predictable
    from the rest; that keeps pseudo-treated cross-validation informative
    about the penalty the real fit needs.
    """
    rng = np.random.default_rng(seed)
    years = config.years
    n_years = years.shape[0]

    levels = config.base_level + config.level_sd * rng.standard_normal(
        config.n_controls
    )
    n_factors = 3
    factors = np.empty((n_years, n_factors))
    factor_shocks = config.shock_sd * rng.standard_normal((n_years, n_factors))
    factors[0] = factor_shocks[0]
    for t in range(1, n_years):
        factors[t] = config.ar_coef * factors[t - 1] + factor_shocks[t]
    loadings = rng.dirichlet(np.ones(n_factors), size=config.n_controls)
    idio = 0.2 * config.shock_sd * rng.standard_normal(
        (n_years, config.n_controls)
    )
    controls = levels + factors @ loadings.T + idio

    donor_idx = rng.choice(config.n_controls, size=config.n_donors, replace=False)
    weights = rng.dirichlet(np.ones(config.n_donors))
    noise = config.noise_sd * rng.standard_normal(n_years)

    treated = config.intercept + controls[:, donor_idx] @ weights + noise
    treated = treated + config.effect * (years >= config.treatment_year)

    control_names = [f"D{j:02d}" for j in range(config.n_controls)]
    treated_name = "Texas-Z00"
    rows = []
    for t, year in enumerate(years):
        rows.append((treated_name, "Texas", int(year), treated[t]))
        for j, name in enumerate(control_names):
            rows.append((name, f"S{j:02d}", int(year), controls[t, j]))
    frame = pd.DataFrame(rows, columns=["unit", "state", "year", "outcome"])
    ds = PanelDataset(
        frame=frame,
        treatment_state="Texas",
        treatment_year=config.treatment_year,
    )
    truth = SynthTruth(
        donor_names=tuple(control_names[j] for j in donor_idx),
        donor_weights=tuple(float(w) for w in weights),
        intercept=config.intercept,
        effect=config.effect,
        treated_name=treated_name,
    )
    return ds, truth
