"""Command-line interface.

Runs are described by TOML spec files and produce deterministic CSV reports:
float values are written with shortest round-trip formatting, header comment
lines carry the package version, a SHA-256 of the spec file and the seed (no
timestamps), so re-running a spec yields a byte-identical file.

Verbs
-----
estimate
    Panel study designs (static, dynamic, triple) with one or more variance
    plans; the report carries per-plan standard errors, the max-SE column and
    significance stars against the max-SE p-value.
synth
    Donor-weight fits for every treated unit plus, optionally, the placebo
    suite over untreated units.
model
    Solve the three-period purchase/home-equity household problem and report
    quantities, multipliers and KKT diagnostics.
dgp
    Generate a synthetic panel (with known truth) to CSV.
montecarlo
    Replicate a design over generated panels; per-replication seeds are split
    from the root seed, and results are aggregated in replication order, so
    the summary does not depend on --threads.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import pandas as pd
import scipy.stats

from .did import DidSpec, estimate_dynamic, estimate_static, estimate_triple
from .dgp import (
    ConfoundSpec,
    DgpConfig,
    EffectSpec,
    ErrorSpec,
    SynthDgpConfig,
    generate,
    generate_synth_panel,
    replicate_seeds,
)
from .errors import ConfigError, PricelabError
from .housemodel import (
    ThreePeriodProblem,
    housing_foc_terms,
    solve_three_period,
)
from .infer import VariancePlan
from .panel import load_panel, state_inverse_weights, write_csv
from .regress import Column, Constant, DummySet, FromYear, Interaction, Trend
from .synth import fit_all_treated, placebo_suite

VERSION = "0.1.0"

THREADS_ENV = "PRICELAB_THREADS"

_VERBS = ("estimate", "synth", "model", "dgp", "montecarlo")

_SCHEMA_ROLES = ("unit", "state", "year", "outcome", "weight", "county",
                 "msa", "lat", "lon")


# ---------------------------------------------------------------------------
# spec loading and validation


def _load_spec(path: str) -> tuple[dict, str]:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        spec = tomllib.loads(blob.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return spec, hashlib.sha256(blob).hexdigest()


def validate_spec(spec: dict, verb: str, base_dir: str = ".") -> list[str]:
    """Collect every problem with a run spec; an empty list means runnable."""
    problems: list[str] = []

    def need_table(name):
        table = spec.get(name)
        if not isinstance(table, dict):
            problems.append(f"[{name}] section is required for {verb}")
            return None
        return table

    if verb in ("estimate", "synth"):
        table = need_table("input")
        if table is not None:
            problems.extend(_check_input(table, base_dir))
    if verb in ("estimate", "montecarlo"):
        design = need_table("design")
        if design is not None:
            mode = design.get("mode", "static")
            if mode not in ("static", "dynamic", "triple"):
                problems.append(f"design.mode must be static, dynamic or triple, got {mode!r}")
            if mode == "triple" and not design.get("heterogeneity"):
                problems.append("triple designs need design.heterogeneity")
            controls = design.get("controls", [])
            if not isinstance(controls, list) or not all(
                isinstance(c, str) for c in controls
            ):
                problems.append("design.controls must be a list of term strings")
        for i, table in enumerate(spec.get("variance", [])):
            kind = table.get("kind")
            if kind not in ("classical", "hc", "cluster", "two_way", "spatial"):
                problems.append(f"variance[{i}].kind {kind!r} is not recognised")
            if kind == "cluster" and not table.get("dim"):
                problems.append(f"variance[{i}] of kind cluster needs dim")
            if kind == "two_way" and len(table.get("dims", [])) != 2:
                problems.append(f"variance[{i}] of kind two_way needs dims = [a, b]")
    if verb == "montecarlo":
        mc = need_table("montecarlo")
        if mc is not None:
            n = mc.get("n_replications")
            if not isinstance(n, int) or n < 1:
                problems.append("montecarlo.n_replications must be a positive integer")
            if not isinstance(mc.get("seed"), int):
                problems.append("montecarlo.seed must be an integer")
        if not isinstance(spec.get("dgp"), dict):
            problems.append("[dgp] section is required for montecarlo")
    if verb == "dgp":
        table = need_table("dgp")
        if table is not None:
            problems.extend(_check_dgp(table))
    if verb == "model":
        model = need_table("model")
        if model is not None:
            for key in ("beta", "house_weight", "incomes", "prices",
                        "gross_rate", "purchase_ltv_cap", "hel_ltv_cap"):
                if key not in model:
                    problems.append(f"model.{key} is required")
            for key in ("incomes", "prices"):
                value = model.get(key)
                if value is not None and (
                    not isinstance(value, list) or len(value) != 3
                ):
                    problems.append(f"model.{key} must be a list of three numbers")
    return problems


def _check_input(table: dict, base_dir: str) -> list[str]:
    problems = []
    has_path = "path" in table
    has_dgp = isinstance(table.get("dgp"), dict)
    if has_path == has_dgp:
        problems.append("input needs exactly one of path or [input.dgp]")
        return problems
    if has_path:
        path = table["path"]
        resolved = path if os.path.isabs(path) else os.path.join(base_dir, path)
        if not os.path.exists(resolved):
            problems.append(f"input.path {path!r} does not exist")
        schema = table.get("schema")
        if not isinstance(schema, dict):
            problems.append("[input.schema] mapping roles to columns is required")
        else:
            for role in ("unit", "state", "year", "outcome"):
                if role not in schema:
                    problems.append(f"input.schema must map role {role!r}")
            for role in schema:
                if role not in _SCHEMA_ROLES:
                    problems.append(f"input.schema role {role!r} is not recognised")
    else:
        problems.extend(_check_dgp(table["dgp"]))
    return problems


def _check_dgp(table: dict) -> list[str]:
    problems = []
    kind = table.get("kind", "panel")
    if kind not in ("panel", "synth"):
        problems.append(f"dgp.kind must be panel or synth, got {kind!r}")
    if not isinstance(table.get("seed", 0), int):
        problems.append("dgp.seed must be an integer")
    return problems


# ---------------------------------------------------------------------------
# building runtime objects from spec tables


def _dgp_config(table: dict) -> DgpConfig:
    effect = EffectSpec(**{
        k: (tuple(tuple(p) for p in v) if k == "per_year" else v)
        for k, v in table.get("effect", {}).items()
    })
    errors = ErrorSpec(**table.get("errors", {}))
    confounds = ConfoundSpec(**table.get("confounds", {}))
    keys = ("n_states", "counties_per_state", "units_per_county", "start_year",
            "end_year", "treatment_year", "treatment_state", "base_outcome",
            "unit_sd", "year_sd", "grid_spacing_km", "county_gap_km",
            "state_gap_km")
    kwargs = {k: table[k] for k in keys if k in table}
    return DgpConfig(effect=effect, errors=errors, confounds=confounds, **kwargs)


def _synth_dgp_config(table: dict) -> SynthDgpConfig:
    keys = ("n_controls", "n_pre", "n_post", "start_year", "effect",
            "noise_sd", "n_donors", "intercept", "ar_coef", "level_sd",
            "shock_sd", "base_level")
    return SynthDgpConfig(**{k: table[k] for k in keys if k in table})


def _build_dataset(spec: dict, base_dir: str):
    table = spec["input"]
    if "dgp" in table:
        dgp_table = table["dgp"]
        seed = dgp_table.get("seed", 0)
        if dgp_table.get("kind", "panel") == "synth":
            ds, _ = generate_synth_panel(_synth_dgp_config(dgp_table), seed)
        else:
            ds, _ = generate(_dgp_config(dgp_table), seed)
        return ds
    path = table["path"]
    if not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    ds = load_panel(
        path,
        schema=table["schema"],
        covariates=tuple(table.get("covariates", ())),
        log_columns=tuple(table.get("log_columns", ())),
        treatment_state=table.get("treatment_state"),
        treatment_year=table.get("treatment_year"),
    )
    return ds


_CATEGORICAL = ("unit", "state", "county", "msa", "stack_tag", "year")


def _parse_term(text: str, ds):
    """Term DSL: parts joined by ':' multiply into an interaction.

    Each part is ``const``, ``post`` (treated from the treatment year),
    ``trend``, the name of a categorical column (expands to its dummy set) or
    the name of a numeric column.
    """
    parts = [p.strip() for p in text.split(":") if p.strip()]
    if not parts:
        raise ConfigError(f"empty term {text!r}")
    factors = []
    for part in parts:
        if part == "const":
            factors.append(Constant())
        elif part == "post":
            if ds.treatment_year is None:
                raise ConfigError("term 'post' needs treatment_year on the input")
            factors.append(FromYear(ds.treatment_year))
        elif part == "trend":
            factors.append(Trend())
        elif part in _CATEGORICAL and part in ds.frame.columns:
            factors.append(DummySet(part))
        elif part in ds.frame.columns:
            factors.append(Column(part))
        else:
            raise ConfigError(f"term part {part!r} is not a known column")
    if len(factors) == 1:
        return factors[0]
    return Interaction(*factors)


def _plan_from_table(table: dict) -> VariancePlan:
    kind = table["kind"]
    if kind == "cluster":
        return VariancePlan.cluster(table["dim"], label=table.get("label"))
    if kind == "two_way":
        dims = table["dims"]
        return VariancePlan.two_way(dims[0], dims[1], label=table.get("label"))
    if kind == "spatial":
        return VariancePlan.spatial(
            cutoff_km=float(table.get("cutoff_km", 100.0)),
            kernel=table.get("kernel", "bartlett"),
            label=table.get("label"),
        )
    return VariancePlan(kind=kind, label=table.get("label"))


def _did_spec(design: dict, ds) -> DidSpec:
    controls = tuple(_parse_term(t, ds) for t in design.get("controls", []))
    return DidSpec(
        mode=design.get("mode", "static"),
        base_year=design.get("base_year"),
        heterogeneity=design.get("heterogeneity"),
        center_heterogeneity=bool(design.get("center", False)),
        controls=controls,
        absorb=tuple(design.get("absorb", ("unit", "year"))),
    )


# ---------------------------------------------------------------------------
# deterministic report writing


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _write_report(path, header: dict, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# pricelab {VERSION}\n")
        for key, value in header.items():
            fh.write(f"# {key}: {value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def significance_stars(p_value: float) -> str:
    """Conventional significance stars: * 10%, ** 5%, *** 1%."""
    if p_value < 0.01:
        return "***"
    if p_value < 0.05:
        return "**"
    if p_value < 0.1:
        return "*"
    return ""


def _term_rows(result, plans):
    """Coefficient table rows with per-plan SEs and max-SE inference."""
    fit = result.fit
    report = result.max_report
    rows = []
    for term in fit.names:
        est = fit.coefficient(term)
        se = report.max_se[term]
        source = report.source[term]
        dof = result.vcovs[source].dof_test
        if se > 0:
            t_stat = est / se
            if np.isinf(dof):
                p = 2.0 * scipy.stats.norm.sf(abs(t_stat))
                crit = scipy.stats.norm.ppf(0.975)
            else:
                p = 2.0 * scipy.stats.t.sf(abs(t_stat), df=dof)
                crit = scipy.stats.t.ppf(0.975, df=dof)
        else:
            t_stat, p, crit = np.nan, np.nan, np.nan
        row = [term, est, se, source, t_stat, p,
               est - crit * se, est + crit * se, significance_stars(p)]
        for plan in plans:
            row.append(result.vcovs[plan.display_label].se[term])
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# verb runners


def run_estimate(spec, sha, out_path, base_dir) -> None:
    ds = _build_dataset(spec, base_dir)
    design = spec.get("design", {})
    if design.get("weights") == "state_inverse":
        ds = state_inverse_weights(ds)
    did_spec = _did_spec(design, ds)
    plans = [_plan_from_table(t) for t in spec.get("variance", [])]
    if not plans:
        plans = [VariancePlan.cluster("state")]
    if did_spec.mode == "static":
        result = estimate_static(ds, did_spec, plans)
    elif did_spec.mode == "dynamic":
        result = estimate_dynamic(ds, did_spec, plans)
    else:
        result = estimate_triple(ds, did_spec, plans)

    header = {"spec_sha256": sha, "design": did_spec.mode,
              "n_obs": result.fit.n_obs, "dof": result.fit.dof}
    if result.pre_trend is not None:
        header["pre_trend_stat"] = repr(result.pre_trend.stat)
        header["pre_trend_p"] = repr(result.pre_trend.p_value)
        header["pre_trend_plan"] = result.pre_trend.plan_label
    columns = ["term", "estimate", "se_max", "se_source", "t_stat", "p_value",
               "ci_low", "ci_high", "stars"]
    columns += [f"se_{p.display_label}" for p in plans]
    _write_report(out_path, header, columns, _term_rows(result, plans))


def run_synth(spec, sha, out_path, base_dir) -> None:
    ds = _build_dataset(spec, base_dir)
    table = spec.get("synth", {})
    outcome = table.get("outcome", "outcome")
    extra = tuple(table.get("extra_columns", ()))
    grid = None
    if "penalties" in table or "l1_ratios" in table:
        penalties = [float(v) for v in table.get("penalties", [])]
        ratios = [float(v) for v in table.get("l1_ratios", [])]
        if not penalties or not ratios:
            raise ConfigError("grid override needs both penalties and l1_ratios")
        grid = tuple((p, r) for p in penalties for r in ratios)

    fits, path, cv = fit_all_treated(ds, grid=grid, outcome=outcome,
                                     extra_columns=extra)
    rows = [
        ["cv", "", "", "penalty", cv.penalty],
        ["cv", "", "", "l1_ratio", cv.l1_ratio],
    ]
    for fit in fits:
        rows.append(["intercept", fit.treated_name, "", "", fit.intercept])
        for name, w in zip(fit.control_names, fit.weights):
            if w != 0.0:
                rows.append(["weight", fit.treated_name, "", name, w])
        for year in fit.pre_years + fit.post_years:
            rows.append(["gap", fit.treated_name, year, "", fit.gaps[year]])
        rows.append(["pre_rmse", fit.treated_name, "", "", fit.pre_rmse])
    for year in path.years:
        rows.append(["avg_gap", "", year, "", path.avg_gap[year]])
    rows.append(["post_mean", "", "", "", path.post_mean])

    header = {"spec_sha256": sha, "n_treated": len(fits)}
    if table.get("placebo", False):
        suite = placebo_suite(ds, grid=grid, outcome=outcome, extra_columns=extra)
        for unit in suite.unit_names:
            rows.append(["placebo_gap", unit, "", "", suite.post_mean_gaps[unit]])
        rows.append(["placebo_mean", "", "", "", suite.placebo_mean])
        rows.append(["placebo_p", "", "", "", suite.p_value(path.post_mean)])
    _write_report(out_path, header, ["record", "unit", "year", "name", "value"],
                  rows)


def run_model(spec, sha, out_path) -> None:
    table = spec["model"]
    problem = ThreePeriodProblem(
        beta=float(table["beta"]),
        house_weight=float(table["house_weight"]),
        incomes=tuple(float(v) for v in table["incomes"]),
        prices=tuple(float(v) for v in table["prices"]),
        gross_rate=float(table["gross_rate"]),
        purchase_ltv_cap=float(table["purchase_ltv_cap"]),
        hel_ltv_cap=float(table["hel_ltv_cap"]),
    )
    sol = solve_three_period(problem)
    cost, benefit = housing_foc_terms(sol, problem)
    rows = [
        ["pattern", sol.pattern],
        ["housing", sol.housing],
        ["purchase_loan", sol.purchase_loan],
        ["hel_loan", sol.hel_loan],
        ["consumption_0", sol.consumption[0]],
        ["consumption_1", sol.consumption[1]],
        ["consumption_2", sol.consumption[2]],
        ["budget_mult_0", sol.budget_mult[0]],
        ["budget_mult_1", sol.budget_mult[1]],
        ["budget_mult_2", sol.budget_mult[2]],
        ["purchase_cap_mult", sol.purchase_cap_mult],
        ["hel_cap_mult", sol.hel_cap_mult],
        ["purchase_floor_mult", sol.purchase_floor_mult],
        ["hel_floor_mult", sol.hel_floor_mult],
        ["utility", sol.utility],
        ["housing_foc_cost", cost],
        ["housing_foc_benefit", benefit],
    ]
    rows += [[f"kkt_{k}", v] for k, v in sorted(sol.kkt.items())]
    _write_report(out_path, {"spec_sha256": sha}, ["name", "value"], rows)


def run_dgp(spec, sha, out_path, base_dir) -> None:
    table = spec["dgp"]
    seed = table.get("seed", 0)
    if table.get("kind", "panel") == "synth":
        ds, _ = generate_synth_panel(_synth_dgp_config(table), seed)
        write_csv(ds, out_path)
        return
    ds, truth = generate(_dgp_config(table), seed)
    write_csv(ds, out_path)
    truth_path = table.get("truth_path")
    if truth_path:
        if not os.path.isabs(truth_path):
            truth_path = os.path.join(base_dir, truth_path)
        frame = truth.components
        out = {c: [repr(float(v)) for v in frame[c]] for c in frame.columns}
        pd.DataFrame(out).to_csv(truth_path, index=False, lineterminator="\n")


def run_montecarlo(spec, sha, out_path, base_dir, threads: int) -> None:
    mc = spec["montecarlo"]
    n = int(mc["n_replications"])
    root_seed = int(mc["seed"])
    config = _dgp_config(spec["dgp"])
    design = spec.get("design", {"mode": "static"})
    mode = design.get("mode", "static")
    plans_tables = spec.get("variance", [{"kind": "cluster", "dim": "state"}])
    seeds = replicate_seeds(root_seed, n)

    if config.effect.kind == "constant":
        truth_value = config.effect.size
    elif config.effect.kind == "none":
        truth_value = 0.0
    else:
        truth_value = None

    def run_one(r: int):
        ds, _ = generate(config, seeds[r])
        if design.get("weights") == "state_inverse":
            data = state_inverse_weights(ds)
        else:
            data = ds
        did_spec = _did_spec(design, data)
        plans = [_plan_from_table(t) for t in plans_tables]
        if mode == "static":
            result = estimate_static(data, did_spec, plans)
            terms = [result.effect_term]
        elif mode == "dynamic":
            result = estimate_dynamic(data, did_spec, plans)
            terms = [result.year_terms[y] for y in sorted(result.year_effects)]
        else:
            result = estimate_triple(data, did_spec, plans)
            terms = [result.level_term, result.slope_term]
        out = {}
        for term in terms:
            est = result.fit.coefficient(term)
            se = result.max_report.max_se[term]
            source = result.max_report.source[term]
            lo, hi = result.confidence_interval(term, source)
            out[term] = (est, se, lo, hi)
        return out

    if threads <= 1:
        results = [run_one(r) for r in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            # map() preserves submission order, so aggregation below is
            # independent of completion order
            results = list(pool.map(run_one, range(n)))

    terms = list(results[0].keys())
    rows = []
    for term in terms:
        est = np.array([res[term][0] for res in results])
        se = np.array([res[term][1] for res in results])
        row = [term, n, truth_value if truth_value is not None else "",
               float(est.mean()),
               float(est.mean() - truth_value) if truth_value is not None else "",
               float(est.std(ddof=1)) if n > 1 else 0.0,
               float(se.mean())]
        if truth_value is not None:
            inside = [
                1.0 if res[term][2] <= truth_value <= res[term][3] else 0.0
                for res in results
            ]
            row.append(float(np.mean(inside)))
        else:
            row.append("")
        rows.append(row)

    header = {"spec_sha256": sha, "seed": root_seed, "n_replications": n}
    _write_report(
        out_path, header,
        ["term", "n_reps", "truth", "mean_estimate", "bias", "sd_estimate",
         "mean_se", "coverage"],
        rows,
    )


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pricelab",
        description="Panel price studies: estimation, synthetic controls, "
                    "household model and Monte Carlo drivers.",
    )
    parser.add_argument("--version", action="version",
                        version=f"pricelab {VERSION}")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in _VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--spec", required=True, help="TOML run spec")
        p.add_argument("--out", help="output CSV path")
        p.add_argument("--validate-only", action="store_true",
                       help="check the spec and exit without running")
        if verb == "montecarlo":
            p.add_argument("--threads", type=int, default=None,
                           help=f"worker threads (default ${THREADS_ENV} or 1)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        spec, sha = _load_spec(args.spec)
    except (OSError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    base_dir = os.path.dirname(os.path.abspath(args.spec))

    problems = validate_spec(spec, args.verb, base_dir)
    if args.validate_only:
        if problems:
            for problem in problems:
                print(f"error: {problem}", file=sys.stderr)
            return 2
        print("spec OK")
        return 0
    if problems:
        for problem in problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    if not args.out:
        print("error: --out is required to run", file=sys.stderr)
        return 2

    threads = getattr(args, "threads", None)
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))

    try:
        if args.verb == "estimate":
            run_estimate(spec, sha, args.out, base_dir)
        elif args.verb == "synth":
            run_synth(spec, sha, args.out, base_dir)
        elif args.verb == "model":
            run_model(spec, sha, args.out)
        elif args.verb == "dgp":
            run_dgp(spec, sha, args.out, base_dir)
        else:
            run_montecarlo(spec, sha, args.out, base_dir, threads)
    except PricelabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
