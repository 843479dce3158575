"""Panel ingestion and reshaping.

A :class:`PanelDataset` is an immutable wrapper around a pandas frame with a
fixed set of role columns (unit, state, year, outcome, weight, ...) plus any
number of numeric covariates. Rows are kept in a canonical order sorted by
(stack_tag, unit, year) so that every downstream reduction sees the same row
order no matter how the source file was arranged; combined with deterministic
summation this makes estimates exactly permutation invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    CoverageError,
    DeflationError,
    IntegrityError,
    SchemaError,
    StackingError,
)

#: Roles every dataset must provide.
REQUIRED_ROLES = ("unit", "state", "year", "outcome")

#: Optional roles recognised by the loader.
OPTIONAL_ROLES = ("weight", "county", "msa", "lat", "lon")

#: stack_tag value for an unstacked dataset.
SINGLE_STACK = "all"

_KEY_COLUMNS = ["stack_tag", "unit", "year"]


@dataclass(frozen=True)
class PanelDataset:
    """Typed panel with canonical row order and declared FE dimensions.

    Attributes
    ----------
    frame : pandas.DataFrame
        Canonical columns plus covariates, sorted by (stack_tag, unit, year).
        The index carries source row numbers for diagnostics.
    covariates : tuple of str
        Names of numeric covariate columns.
    fe_dims : mapping of str -> tuple of str
        Declared fixed-effect dimensions; each maps a name to the grouping
        columns that define its levels.
    treatment_state, treatment_year
        Optional treatment assignment used by the study designs.
    log_columns : frozenset of str
        Columns known to live on a log scale (deflation is refused).
    diagnostics : tuple of str
        Row-level problems encountered while loading (rejected rows).
    """

    frame: pd.DataFrame
    covariates: tuple[str, ...] = ()
    fe_dims: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    treatment_state: str | None = None
    treatment_year: int | None = None
    log_columns: frozenset[str] = frozenset()
    diagnostics: tuple[str, ...] = ()

    def __post_init__(self):
        frame = self.frame
        for role in REQUIRED_ROLES:
            if role not in frame.columns:
                raise SchemaError(f"dataset is missing required column {role!r}")
        if "stack_tag" not in frame.columns:
            frame = frame.assign(stack_tag=SINGLE_STACK)
        if "weight" not in frame.columns:
            frame = frame.assign(weight=1.0)
        w = frame["weight"].to_numpy(dtype=float)
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            bad = frame.index[~(np.isfinite(w) & (w > 0))].tolist()
            raise IntegrityError(f"weights must be strictly positive; bad rows {bad}")
        dup = frame.duplicated(subset=_KEY_COLUMNS, keep=False)
        if dup.any():
            groups = frame.index[dup].tolist()
            raise IntegrityError(
                "duplicate (unit, year) observations within a stack copy; "
                f"rows {groups}"
            )
        frame = frame.sort_values(_KEY_COLUMNS, kind="mergesort")
        if self.treatment_year is not None and len(frame) > 0:
            years = frame["year"].to_numpy()
            if not (years.min() < self.treatment_year <= years.max()):
                raise IntegrityError(
                    f"treatment_year {self.treatment_year} must lie strictly "
                    f"inside the observed year span [{years.min()}, {years.max()}]"
                )
        dims = dict(self.fe_dims) if self.fe_dims else {}
        for name, cols in (("unit", ("unit",)), ("year", ("year",)), ("state", ("state",))):
            dims.setdefault(name, cols)
        for opt in ("county", "msa"):
            if opt in frame.columns:
                dims.setdefault(opt, (opt,))
        for name, cols in dims.items():
            for c in cols:
                if c not in frame.columns:
                    raise SchemaError(f"FE dimension {name!r} needs missing column {c!r}")
        object.__setattr__(self, "frame", frame)
        object.__setattr__(self, "fe_dims", dims)
        object.__setattr__(self, "covariates", tuple(self.covariates))

    # -- basic accessors ----------------------------------------------------

    def __len__(self):
        return len(self.frame)

    @property
    def years(self) -> np.ndarray:
        return np.sort(self.frame["year"].unique())

    @property
    def units(self) -> np.ndarray:
        return np.sort(self.frame["unit"].unique())

    def column(self, name: str) -> np.ndarray:
        if name not in self.frame.columns:
            raise SchemaError(f"no column {name!r} in dataset")
        return self.frame[name].to_numpy()

    @property
    def weights(self) -> np.ndarray:
        return self.frame["weight"].to_numpy(dtype=float)

    @property
    def is_stacked(self) -> bool:
        tags = self.frame["stack_tag"]
        return tags.nunique() > 1 or (len(tags) > 0 and tags.iloc[0] != SINGLE_STACK)

    # -- derived datasets ---------------------------------------------------

    def with_treatment(self, state: str, year: int) -> "PanelDataset":
        """Return a copy with the treatment assignment set."""
        if state not in set(self.frame["state"]):
            raise SchemaError(f"treatment state {state!r} not present in data")
        return replace(self, treatment_state=state, treatment_year=int(year))

    def declare_fe(self, name: str, columns: Sequence[str]) -> "PanelDataset":
        """Declare an extra fixed-effect dimension (e.g. pair-by-year)."""
        dims = dict(self.fe_dims)
        dims[name] = tuple(columns)
        return replace(self, fe_dims=dims)

    def with_columns(self, **arrays) -> "PanelDataset":
        """Attach or replace covariate columns (values aligned to rows)."""
        frame = self.frame.copy()
        new_covs = list(self.covariates)
        reserved = set(REQUIRED_ROLES) | set(OPTIONAL_ROLES) | {"stack_tag"}
        for name, values in arrays.items():
            frame[name] = values
            if name not in new_covs and name not in reserved:
                new_covs.append(name)
        return replace(self, frame=frame, covariates=tuple(new_covs))

    def subset(self, mask) -> "PanelDataset":
        return replace(self, frame=self.frame.loc[mask])

    def group_codes(self, dim: str) -> tuple[np.ndarray, int]:
        """Integer group codes for a declared FE dimension.

        Returns (codes, n_levels); codes follow first-appearance order in the
        canonical row order, which keeps them reproducible.
        """
        if dim not in self.fe_dims:
            raise SchemaError(
                f"FE dimension {dim!r} not declared; available: {sorted(self.fe_dims)}"
            )
        cols = self.fe_dims[dim]
        if len(cols) == 1:
            key = self.frame[cols[0]]
        else:
            key = pd.Series(
                list(zip(*(self.frame[c] for c in cols))), index=self.frame.index
            )
        codes, uniques = pd.factorize(key, sort=False)
        return codes.astype(np.int64), len(uniques)


# ---------------------------------------------------------------------------
# loading


def _parse_float(raw):
    value = float(raw)
    if not np.isfinite(value):
        raise ValueError("not finite")
    return value


def load_panel(
    path,
    schema: Mapping[str, str],
    covariates: Sequence[str] = (),
    log_columns: Iterable[str] = (),
    treatment_state: str | None = None,
    treatment_year: int | None = None,
) -> PanelDataset:
    """Load a CSV into a :class:`PanelDataset`.

    Parameters
    ----------
    path : str or Path
        CSV file with a header row.
    schema : mapping
        Maps role names (unit, state, year, outcome, and optionally weight,
        county, msa, lat, lon) to column names in the file.
    covariates : sequence of str
        Extra numeric columns to carry along.
    log_columns : iterable of str
        Columns (by their dataset name) that live on a log scale. Columns
        whose name starts with ``log`` are flagged automatically.

    Rows whose required fields fail to parse are rejected; each rejection is
    recorded as a row-numbered diagnostic on the returned dataset. Structural
    problems (missing columns, duplicate keys, bad weights) raise.
    """
    for role in REQUIRED_ROLES:
        if role not in schema:
            raise SchemaError(f"schema must map required role {role!r}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    for role, col in schema.items():
        if col not in raw.columns:
            raise SchemaError(f"column {col!r} (role {role!r}) not found in {path}")
    for col in covariates:
        if col not in raw.columns:
            raise SchemaError(f"covariate column {col!r} not found in {path}")

    records = {}
    diagnostics = []
    keep = np.ones(len(raw), dtype=bool)

    def parse_column(name, source, parser, required):
        values = []
        for i, cell in enumerate(raw[source]):
            try:
                values.append(parser(cell))
            except (TypeError, ValueError):
                values.append(None)
                if required and keep[i]:
                    keep[i] = False
                    diagnostics.append(
                        f"row {i + 1}: could not parse {source!r} value {cell!r} "
                        f"for role {name!r}"
                    )
                elif not required:
                    values[-1] = np.nan
        return values

    def parse_str(cell):
        text = str(cell).strip()
        if not text:
            raise ValueError("empty")
        return text

    records["unit"] = parse_column("unit", schema["unit"], parse_str, True)
    records["state"] = parse_column("state", schema["state"], parse_str, True)
    records["year"] = parse_column("year", schema["year"], lambda c: int(str(c).strip()), True)
    records["outcome"] = parse_column("outcome", schema["outcome"], _parse_float, True)
    if "weight" in schema:
        records["weight"] = parse_column("weight", schema["weight"], _parse_float, True)
    for role in ("county", "msa"):
        if role in schema:
            records[role] = parse_column(role, schema[role], parse_str, True)
    for role in ("lat", "lon"):
        if role in schema:
            records[role] = parse_column(role, schema[role], _parse_float, False)
    for col in covariates:
        records[col] = parse_column(col, col, _parse_float, False)

    frame = pd.DataFrame(records, index=pd.RangeIndex(1, len(raw) + 1, name="source_row"))
    frame = frame.loc[keep]
    if len(frame) == 0:
        raise SchemaError(f"no usable rows in {path}; diagnostics: {diagnostics}")

    flagged = {c for c in frame.columns if c.startswith("log")}
    flagged.update(log_columns)
    if schema["outcome"].startswith("log"):
        flagged.add("outcome")

    return PanelDataset(
        frame=frame,
        covariates=tuple(covariates),
        treatment_state=treatment_state,
        treatment_year=treatment_year,
        log_columns=frozenset(flagged),
        diagnostics=tuple(diagnostics),
    )


def write_csv(ds: PanelDataset, path) -> None:
    """Write the dataset to CSV with round-trip float formatting.

    Floats are written with shortest round-trip representation so that
    ``write_csv`` followed by :func:`load_panel` reproduces values bit for bit.
    """
    frame = ds.frame.copy()
    out = {}
    for col in frame.columns:
        series = frame[col]
        if series.dtype.kind == "f":
            out[col] = [repr(float(v)) for v in series]
        else:
            out[col] = series.astype(str).tolist()
    pd.DataFrame(out).to_csv(path, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# transforms


def apply_deflator(
    ds: PanelDataset,
    index: Mapping[int, float],
    columns: Sequence[str],
    base_year: int,
) -> PanelDataset:
    """Deflate level columns by a year-indexed price series.

    value_real = value_nominal * index[base_year] / index[year]. Every year in
    the data must be covered by the series, and columns flagged as log scale
    are refused (deflating a log column is a unit error, subtract instead).
    """
    if base_year not in index:
        raise CoverageError(f"deflator series does not cover base year {base_year}")
    years = ds.frame["year"].unique()
    missing = sorted(int(y) for y in years if y not in index)
    if missing:
        raise CoverageError(f"deflator series missing years {missing}")
    for col in columns:
        if col in ds.log_columns:
            raise DeflationError(
                f"column {col!r} is on a log scale; refusing to deflate it"
            )
        if col not in ds.frame.columns:
            raise SchemaError(f"no column {col!r} to deflate")
    base = float(index[base_year])
    factors = ds.frame["year"].map(lambda y: base / float(index[y])).to_numpy()
    frame = ds.frame.copy()
    for col in columns:
        frame[col] = frame[col].to_numpy(dtype=float) * factors
    return replace(ds, frame=frame)


def state_inverse_weights(ds: PanelDataset) -> PanelDataset:
    """Set each row's weight to 1 / (number of distinct units in its state).

    Per-unit weights then sum to one within every state, so each state
    contributes equally to weighted estimates regardless of how many units
    it happens to contain.
    """
    counts = ds.frame.groupby("state")["unit"].nunique()
    frame = ds.frame.copy()
    frame["weight"] = ds.frame["state"].map(lambda s: 1.0 / counts[s]).astype(float)
    return replace(ds, frame=frame)


def prelaw_mean(ds: PanelDataset, column: str, new_column: str | None = None) -> PanelDataset:
    """Attach the per-unit pre-treatment mean of ``column`` as a new column.

    The mean is taken over years strictly before ``treatment_year`` and
    assigned to every row of the unit, producing a treatment-invariant
    unit-level exposure measure.
    """
    if ds.treatment_year is None:
        raise SchemaError("prelaw_mean needs treatment_year set on the dataset")
    if column not in ds.frame.columns:
        raise SchemaError(f"no column {column!r} in dataset")
    new_column = new_column or f"{column}_prelaw"
    pre = ds.frame[ds.frame["year"] < ds.treatment_year]
    means = pre.groupby("unit")[column].mean()
    missing = sorted(set(ds.frame["unit"]) - set(means.index))
    if missing:
        raise CoverageError(
            f"units with no pre-treatment rows, cannot form pre-law mean: {missing}"
        )
    values = ds.frame["unit"].map(means).to_numpy(dtype=float)
    return ds.with_columns(**{new_column: values})


def stack_border_pairs(
    ds: PanelDataset, pairs: Sequence[tuple[str, str]]
) -> PanelDataset:
    """Stack county observations once per containing border pair.

    Each pair is a (county, county) tuple. Every observation in either county
    of a pair contributes one copy tagged with that pair's identifier, so a
    county sitting in several pairs appears once per pair. Counties in no pair
    are dropped. The result declares a ``pair_year`` FE dimension for
    pair-by-year effects. Stacking an already stacked dataset is refused.
    """
    if ds.is_stacked:
        raise StackingError("dataset is already stacked; re-stacking is not defined")
    if "county" not in ds.frame.columns:
        raise SchemaError("border-pair stacking needs a county column")
    copies = []
    seen = set()
    for a, b in pairs:
        tag = f"{a}|{b}"
        if tag in seen:
            raise StackingError(f"pair {tag!r} given twice")
        seen.add(tag)
        block = ds.frame[ds.frame["county"].isin((a, b))].copy()
        block["stack_tag"] = tag
        copies.append(block)
    if copies:
        frame = pd.concat(copies, axis=0)
    else:
        frame = ds.frame.iloc[0:0].copy()
        frame["stack_tag"] = pd.Series(dtype=str)
    out = replace(ds, frame=frame)
    return out.declare_fe("pair_year", ("stack_tag", "year"))
