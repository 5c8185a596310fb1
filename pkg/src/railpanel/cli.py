"""Batch command line: ``railpanel <verb> [options]``.

Verbs: build-panel, estimate, event-study, diagnostics, simulate, validate.
Every verb writes its tables into ``--out`` and exits non-zero with a JSON
error object on stderr when something fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from railpanel.cs_did import aggregate_event_study, estimate_cs, estimate_group_time
from railpanel.dgp import ESTIMATORS, DgpConfig, monte_carlo
from railpanel.diagnostics import balance_table, density_table, summary_stats
from railpanel.errors import RailpanelError
from railpanel.microdata import MICRO_COLUMNS, build_panel
from railpanel.panel import PanelDataset, read_panel_csv, validate_panel, write_panel_csv
from railpanel.spatial import market_access_matrix, haversine_km
from railpanel.twfe import ControlSpec, estimate_twfe
from railpanel.variance import VcovSpec

log = logging.getLogger("railpanel")

ESTIMATE_COLUMNS = ["outcome", "estimator", "vcov", "estimate", "se", "p_value", "stars",
                    "n_obs", "mean_outcome", "n_clusters"]


# -- config -------------------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise RailpanelError("PARSE_ERROR", str(exc), file=str(path)) from exc
    except yaml.YAMLError as exc:
        raise RailpanelError("PARSE_ERROR", f"invalid config: {exc}", file=str(path)) from exc
    if not isinstance(cfg, dict):
        raise RailpanelError("PARSE_ERROR", "config must be a mapping", file=str(path))
    return cfg


def default_simulate_config() -> dict:
    text = resources.files("railpanel").joinpath("configs/simulate.yaml").read_text("utf-8")
    return yaml.safe_load(text)


def _read_csv(path, required, dtype=None):
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=dtype, keep_default_na=False, na_values=[""],
                         encoding="utf-8")
    except FileNotFoundError as exc:
        raise RailpanelError("PARSE_ERROR", f"{path} not found", file=str(path)) from exc
    except pd.errors.EmptyDataError as exc:
        raise RailpanelError("EMPTY_RESULT", f"{path} is empty", file=str(path)) from exc
    except pd.errors.ParserError as exc:
        raise RailpanelError("PARSE_ERROR", str(exc), file=str(path)) from exc
    for c in required:
        if c not in df.columns:
            raise RailpanelError("SCHEMA_ERROR", f"{path}: required column {c!r} missing",
                                 file=str(path), column=c)
    return df


def load_panel(path, cfg):
    data = cfg.get("data", {}) or {}
    return read_panel_csv(path, outcomes=data.get("outcomes"),
                          covariates=data.get("covariates", ()),
                          clusters=data.get("clusters"))


def controls_from_config(cfg) -> ControlSpec:
    c = cfg.get("controls", {}) or {}
    if c.get("none", False):
        return ControlSpec.none()
    return ControlSpec(decile_vars=tuple(c.get("decile_vars", ())),
                       county_period=bool(c.get("county_period", True)),
                       county=c.get("county", "county"),
                       linear_vars=tuple(c.get("linear_vars", ())))


def cs_covariates_from_config(cfg):
    c = cfg.get("controls", {}) or {}
    if c.get("none", False):
        return ()
    return tuple(c.get("cs_covariates", c.get("decile_vars", ())))


def vcovs_from_config(cfg):
    specs = cfg.get("vcov", ["cluster:unit"])
    if isinstance(specs, str):
        specs = [specs]
    return [VcovSpec.parse(s) for s in specs]


# -- output helpers -------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(obj, path):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(df, path):
    df.to_csv(path, index=False, na_rep="", lineterminator="\n")


# -- commands -----------------------------------------------------------------

def cmd_build_panel(args, cfg):
    bp = cfg.get("build", {}) or {}
    micro = _read_csv(args.micro, MICRO_COLUMNS, dtype={"parish_id": str, "birth_county": str,
                                                        "residence_county": str, "sex": str})
    if micro.empty:
        raise RailpanelError("EMPTY_RESULT", f"{args.micro} has no records", file=str(args.micro))
    sched = _read_csv(args.schedule, ["unit_id", "treatment_year", "lat", "lon"],
                      dtype={"unit_id": str, "county": str, "hundred": str})
    sched = sched.set_index("unit_id")
    schedule = {u: (None if pd.isna(y) else int(y)) for u, y in sched["treatment_year"].items()}
    reserved = {"treatment_year", "lat", "lon", "county", "hundred"}
    covariates = [c for c in sched.columns if c not in reserved]

    geo = sched.copy()
    if args.anchors:
        anchors = _read_csv(args.anchors, ["name", "lat", "lon"])
        if "seq" in anchors.columns:
            anchors = anchors.sort_values(["name", "seq"], kind="stable")
        for name, pts in anchors.groupby("name", sort=True):
            col = f"dist_{name}"
            d = haversine_km(geo["lat"].to_numpy(float)[:, None], geo["lon"].to_numpy(float)[:, None],
                             pts["lat"].to_numpy(float)[None, :], pts["lon"].to_numpy(float)[None, :])
            geo[col] = d.min(axis=1)
            covariates.append(col)

    ds = build_panel(micro, schedule, geo, covariates=covariates)
    frame = ds.frame.copy()
    outcomes = list(ds.outcomes)
    if args.sites:
        sites = _read_csv(args.sites, ["kind", "lat", "lon", "opening_year"])
        floor = float(bp.get("floor_km", 1.0))
        uni = ds.unit_table
        years = ds.periods
        for kind, s in sites.groupby("kind", sort=True):
            ma = market_access_matrix(uni["lat"].to_numpy(float), uni["lon"].to_numpy(float),
                                      s["lat"].to_numpy(float), s["lon"].to_numpy(float),
                                      s["opening_year"].to_numpy(), years, floor)
            col = f"ma_{kind}"
            frame[col] = ma[ds.unit_codes, ds.period_codes]
            outcomes.append(col)
    ds = PanelDataset(frame, tuple(outcomes), ds.covariates, ds.clusters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_panel_csv(ds, out / "panel.csv")
    return {"panel": str(out / "panel.csv"), "rows": len(ds), "units": ds.n_units}


def _check_outcomes(ds, outcomes):
    for o in outcomes:
        if o not in ds.frame.columns:
            raise RailpanelError("SCHEMA_ERROR", f"unknown outcome {o!r}", column=o, outcome=o)


def cmd_estimate(args, cfg):
    ds = load_panel(args.panel, cfg)
    validate_panel(ds).raise_for_errors()
    outcomes = cfg.get("outcomes") or list(ds.outcomes)
    _check_outcomes(ds, outcomes)
    estimators = cfg.get("estimators", ["twfe", "cs"])
    controls = controls_from_config(cfg)
    cs_cov = cs_covariates_from_config(cfg)
    method = (cfg.get("cs", {}) or {}).get("method")
    rows = []
    for outcome in outcomes:
        res = None
        for est in estimators:
            for vc in vcovs_from_config(cfg):
                try:
                    if est == "twfe":
                        row = estimate_twfe(ds, outcome, controls, vc)
                    elif est == "cs":
                        if vc.scheme == "CONLEY":
                            log.info("skipping Conley errors for cs (TWFE only)")
                            continue
                        if res is None:
                            res = estimate_group_time(ds, outcome, cs_cov, method)
                        row = estimate_cs(ds, outcome, vcov=vc, result=res)
                    else:
                        raise RailpanelError("BAD_CONFIG", f"unknown estimator {est!r}")
                except RailpanelError as exc:
                    exc.context.setdefault("outcome", outcome)
                    raise
                rows.append(row.to_dict())
    table = pd.DataFrame(rows, columns=ESTIMATE_COLUMNS)
    table["n_clusters"] = table["n_clusters"].astype("Int64")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(table, out / "estimates.csv")
    write_json({"estimates": rows, "controls": {"decile_vars": list(controls.decile_vars),
                                                "county_period": controls.county_period,
                                                "none": controls.none_flag,
                                                "cs_covariates": list(cs_cov)}},
               out / "estimates.json")
    return {"estimates": str(out / "estimates.csv"), "rows": len(rows)}


def cmd_event_study(args, cfg):
    ds = load_panel(args.panel, cfg)
    validate_panel(ds).raise_for_errors()
    outcomes = cfg.get("outcomes") or list(ds.outcomes)
    _check_outcomes(ds, outcomes)
    cs_cov = cs_covariates_from_config(cfg)
    method = (cfg.get("cs", {}) or {}).get("method")
    boot = cfg.get("bootstrap", {}) or {}
    B = int(boot.get("B", 999))
    seed = args.seed if args.seed is not None else int(boot.get("seed", 0))
    series, cells = [], []
    for outcome in outcomes:
        try:
            res = estimate_group_time(ds, outcome, cs_cov, method)
            es = aggregate_event_study(res, B=B, seed=seed)
        except RailpanelError as exc:
            exc.context.setdefault("outcome", outcome)
            raise
        s = es.to_frame(outcome)
        s["band_critical"] = es.band_critical
        series.append(s)
        cells.append(res.to_frame())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = pd.concat(series, ignore_index=True)
    write_csv(table[["outcome", "event_time", "estimate", "se", "lo95", "hi95",
                     "band_lo", "band_hi"]], out / "event_study.csv")
    write_csv(pd.concat(cells, ignore_index=True), out / "group_time_cells.csv")
    write_json({"series": table.to_dict(orient="records"), "bootstrap": {"B": B, "seed": seed}},
               out / "event_study.json")
    return {"event_study": str(out / "event_study.csv"), "rows": len(table)}


def cmd_diagnostics(args, cfg):
    ds = load_panel(args.panel, cfg)
    d = cfg.get("diagnostics", {}) or {}
    base = d.get("base_period")
    balance_vars = list(d.get("balance_vars", []))
    summary_vars = list(d.get("summary_vars", []))
    density_vars = list(d.get("density_vars", balance_vars))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if not (balance_vars or summary_vars or density_vars):
        log.warning("diagnostics: no variables configured; nothing to do")
        return written
    if summary_vars:
        write_csv(summary_stats(ds, summary_vars), out / "summary.csv")
        written["summary"] = str(out / "summary.csv")
    if balance_vars:
        write_csv(balance_table(ds, balance_vars, base), out / "balance.csv")
        written["balance"] = str(out / "balance.csv")
    if density_vars:
        grid = int(d.get("grid_size", 512))
        frames = [density_table(ds, density_vars, "ever", base, grid).assign(grouping="ever")]
        cuts = d.get("cohort_cuts")
        if cuts:
            cuts = [(str(c[0]), c[1], c[2]) for c in cuts]
            frames.append(density_table(ds, density_vars, cuts, base, grid).assign(grouping="cohort"))
        write_csv(pd.concat(frames, ignore_index=True)[["grouping", "variable", "group", "grid",
                                                         "density"]], out / "density.csv")
        written["density"] = str(out / "density.csv")
    return written


def cmd_simulate(args, cfg):
    sim = dict(default_simulate_config()["simulate"])
    sim.update(cfg.get("simulate", {}) or {})
    dgp = DgpConfig.from_dict(sim.get("dgp", {}) or {})
    reps = int(sim.get("reps", 200))
    seed = args.seed if args.seed is not None else int(sim.get("seed", 0))
    reports = {}
    for name in sim.get("estimators", ["cs", "twfe"]):
        if name not in ESTIMATORS:
            raise RailpanelError("BAD_CONFIG", f"unknown estimator {name!r}")
        rep = monte_carlo(ESTIMATORS[name](), dgp, reps, seed=seed, n_jobs=args.threads, name=name)
        reports[name] = rep.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json({"dgp": dgp.to_dict(), "reps": reps, "seed": seed, "reports": reports},
               out / "simulation.json")
    return {"simulation": str(out / "simulation.json")}


def cmd_validate(args, cfg):
    ds = load_panel(args.panel, cfg)
    report = validate_panel(ds, require_coords=bool(cfg.get("require_coords", False)))
    payload = {"errors": [list(e) for e in report.errors],
               "warnings": [list(w) for w in report.warnings]}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(payload, out / "validation.json")
    if report.errors:
        report.raise_for_errors()
    return {"validation": str(out / "validation.json"), "warnings": len(report.warnings)}


COMMANDS = {
    "build-panel": cmd_build_panel,
    "estimate": cmd_estimate,
    "event-study": cmd_event_study,
    "diagnostics": cmd_diagnostics,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="railpanel", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="parallel workers")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-panel", parents=[common], help="aggregate micro records to a panel")
    b.add_argument("--micro", type=Path, required=True)
    b.add_argument("--schedule", type=Path, required=True,
                   help="unit_id, treatment_year, lat, lon[, county, hundred, covariates...]")
    b.add_argument("--sites", type=Path, help="kind, lat, lon, opening_year")
    b.add_argument("--anchors", type=Path, help="name, lat, lon[, seq]")
    for name in ("estimate", "event-study", "diagnostics", "validate"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("panel", type=Path)
    sub.add_parser("simulate", parents=[common], help="Monte Carlo on a synthetic DGP")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        result = COMMANDS[args.command](args, cfg)
    except RailpanelError as exc:
        print(json.dumps(_clean(exc.to_dict()), sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(_clean(result), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
