"""Aggregate individual census records into parish-year outcomes."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields

import numpy as np
import pandas as pd

from railpanel.errors import RailpanelError
from railpanel.panel import PanelDataset

log = logging.getLogger(__name__)

MANUFACTURING_MAJORS = (7, 8, 9)
AGRICULTURE_MAJOR = 6
CHILD_AGES = (1, 5)
WOMEN_AGES = (15, 45)

OUTCOMES = ("population", "child_women_ratio", "manufacturing", "non_agricultural",
            "migration", "hiscam_avg", "log_population", "log_migration")
MICRO_COLUMNS = ("parish_id", "year", "age", "sex", "birth_county", "residence_county",
                 "hisco_major", "hiscam")


@dataclass(frozen=True)
class MicroRecord:
    parish: str
    year: int
    age: int | None = None
    sex: str = "unknown"
    birth_county: str | None = None
    residence_county: str | None = None
    hisco_major: int | None = None
    hiscam: float | None = None

    def __post_init__(self):
        if self.age is not None and self.age < 0:
            raise RailpanelError("BAD_RECORD", f"negative age {self.age}")
        if self.hisco_major is not None and self.hisco_major not in range(10):
            log.warning("HISCO major %r outside 0-9 treated as missing", self.hisco_major)
            object.__setattr__(self, "hisco_major", None)


def _one_cell(records):
    records = list(records)
    if len({(r.parish, r.year) for r in records}) > 1:
        raise RailpanelError("MIXED_CELL", "records span more than one parish-year")
    return records


def population_count(records) -> int:
    return len(_one_cell(records))


def child_women_ratio(records):
    """Children aged 1-5 per woman aged 15-45; ``None`` without eligible women."""
    records = _one_cell(records)
    lo, hi = CHILD_AGES
    children = sum(1 for r in records if r.age is not None and lo <= r.age <= hi)
    lo, hi = WOMEN_AGES
    women = sum(1 for r in records
                if r.sex == "female" and r.age is not None and lo <= r.age <= hi)
    return None if women == 0 else children / women


def sector_shares(records):
    """``(manufacturing, non_agricultural)`` shares of the coded labour force."""
    records = _one_cell(records)
    majors = [r.hisco_major for r in records if r.hisco_major is not None]
    if not majors:
        return None
    L = len(majors)
    manuf = sum(1 for m in majors if m in MANUFACTURING_MAJORS)
    agri = sum(1 for m in majors if m == AGRICULTURE_MAJOR)
    return manuf / L, (L - agri) / L


def migration_count(records) -> int:
    records = _one_cell(records)
    return sum(1 for r in records
               if r.birth_county is not None and r.residence_county is not None
               and r.birth_county != r.residence_county)


def hiscam_mean(records):
    records = _one_cell(records)
    vals = [r.hiscam for r in records if r.hiscam is not None]
    return None if not vals else math.fsum(vals) / len(vals)


def records_to_frame(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        df = records.rename(columns={"parish": "parish_id"}).copy()
    else:
        rows = [{f.name: getattr(r, f.name) for f in fields(MicroRecord)} for r in records]
        df = pd.DataFrame(rows, columns=[f.name for f in fields(MicroRecord)])
        df = df.rename(columns={"parish": "parish_id"})
    df["parish_id"] = df["parish_id"].astype(str)
    df["year"] = df["year"].astype(np.int64)
    for c in ("age", "hisco_major", "hiscam"):
        df[c] = pd.to_numeric(df[c], errors="coerce").astype(float)
    bad = df["hisco_major"].notna() & ~df["hisco_major"].isin(range(10))
    if bad.any():
        log.warning("%d HISCO major code(s) outside 0-9 treated as missing", int(bad.sum()))
        df.loc[bad, "hisco_major"] = np.nan
    df["sex"] = df["sex"].fillna("unknown").astype(str).str.lower()
    for c in ("birth_county", "residence_county"):
        df[c] = df[c].where(df[c].notna() & (df[c].astype(str) != ""), None)
    return df


def aggregate_records(records) -> pd.DataFrame:
    """Parish-year outcome table, one row per observed parish-year."""
    df = records_to_frame(records)
    if df.empty:
        raise RailpanelError("EMPTY_RESULT", "no micro records")
    age = df["age"]
    df["_child"] = age.between(*CHILD_AGES)
    df["_woman"] = (df["sex"] == "female") & age.between(*WOMEN_AGES)
    df["_coded"] = df["hisco_major"].notna()
    df["_manuf"] = df["hisco_major"].isin(MANUFACTURING_MAJORS)
    df["_agri"] = df["hisco_major"] == AGRICULTURE_MAJOR
    df["_migrant"] = (df["birth_county"].notna() & df["residence_county"].notna()
                      & (df["birth_county"] != df["residence_county"]))
    g = df.groupby(["parish_id", "year"], sort=True)
    out = pd.DataFrame({
        "population": g.size(),
        "_child": g["_child"].sum(),
        "_woman": g["_woman"].sum(),
        "_coded": g["_coded"].sum(),
        "_manuf": g["_manuf"].sum(),
        "_agri": g["_agri"].sum(),
        "migration": g["_migrant"].sum(),
        "hiscam_avg": g["hiscam"].mean(),
    })
    woman = out["_woman"].where(out["_woman"] > 0)
    coded = out["_coded"].where(out["_coded"] > 0)
    out["child_women_ratio"] = out["_child"] / woman
    out["manufacturing"] = out["_manuf"] / coded
    out["non_agricultural"] = (out["_coded"] - out["_agri"]) / coded
    # zeros become missing rather than receiving an added constant
    out["log_population"] = np.log(out["population"].where(out["population"] > 0))
    out["log_migration"] = np.log(out["migration"].where(out["migration"] > 0))
    out = out.reset_index()
    return out[["parish_id", "year", *OUTCOMES]].astype({"population": float, "migration": float})


def build_panel(records, schedule, geo: pd.DataFrame | None = None, years=None,
                covariates=()) -> PanelDataset:
    """Assemble the parish-year panel from micro records.

    Parameters
    ----------
    records : iterable of MicroRecord or DataFrame with the micro CSV schema
    schedule : mapping unit -> connection year (None = never) or TreatmentSchedule
    geo : DataFrame indexed by unit id with ``lat, lon`` and optional
        ``county, hundred`` and covariate columns
    years : period grid; defaults to the census years present in the records

    Parishes absent from a census year get a row with missing outcomes.
    """
    agg = aggregate_records(records)
    first = getattr(schedule, "first_treated", schedule)
    units = sorted(set(agg["parish_id"]))
    years = sorted(set(agg["year"])) if years is None else sorted(int(y) for y in years)
    grid = pd.MultiIndex.from_product([units, years], names=["parish_id", "year"])
    panel = agg.set_index(["parish_id", "year"]).reindex(grid).reset_index()
    panel = panel.rename(columns={"parish_id": "unit_id"})
    panel.insert(2, "treatment_year", [np.nan if first.get(u) is None else float(first[u])
                                       for u in panel["unit_id"]])
    clusters = []
    if geo is not None:
        geo = geo.copy()
        geo.index = geo.index.astype(str)
        missing = sorted(set(units) - set(geo.index))
        if missing:
            log.warning("%d parish(es) without geography: %s", len(missing), missing[:5])
        for c in ("lat", "lon", *[c for c in ("county", "hundred") if c in geo.columns],
                  *covariates):
            panel[c] = panel["unit_id"].map(geo[c])
        clusters = [c for c in ("county", "hundred") if c in geo.columns]
    else:
        panel["lat"] = np.nan
        panel["lon"] = np.nan
    return PanelDataset(panel, outcomes=OUTCOMES, covariates=tuple(covariates),
                        clusters=tuple(clusters))
