"""Unit-by-period panel with a staggered, absorbing treatment schedule.

The panel is stored in long form (one row per unit-period) so that missing
outcome cells stay explicit. Estimators pull dense unit x period matrices
through :meth:`PanelDataset.wide`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from railpanel.errors import RailpanelError

log = logging.getLogger(__name__)

NEVER = None

UNIT, YEAR, TREAT, LAT, LON = "unit_id", "year", "treatment_year", "lat", "lon"
REQUIRED_COLUMNS = (UNIT, YEAR, TREAT, LAT, LON)
DEFAULT_CLUSTERS = ("county", "hundred")


@dataclass(frozen=True)
class TreatmentSchedule:
    """First-treatment year per unit; ``None`` marks a never-treated unit."""

    first_treated: Mapping[str, int | None]

    def __contains__(self, unit):
        return unit in self.first_treated

    def treated(self, unit, t) -> bool:
        year = self.first_treated[unit]
        return year is not None and t >= year

    def cohort(self, unit, periods: Iterable[int]) -> int | None:
        """First panel period at or after the unit's connection year."""
        year = self.first_treated[unit]
        if year is None:
            return None
        for p in sorted(periods):
            if p >= year:
                return p
        return None

    @property
    def never_treated(self) -> list[str]:
        return [u for u, y in self.first_treated.items() if y is None]


@dataclass(frozen=True)
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self, which="errors") -> set[str]:
        return {e[0] for e in getattr(self, which)}

    def raise_for_errors(self):
        if self.errors:
            code, unit, period, msg = self.errors[0]
            raise RailpanelError(code, msg, unit=unit, period=period,
                                 n_errors=len(self.errors))


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Long-form panel.

    Parameters
    ----------
    frame : DataFrame
        Must contain ``unit_id, year, treatment_year, lat, lon`` plus the
        named outcome, covariate and cluster columns. ``treatment_year`` is
        NaN for never-treated units.
    outcomes : sequence of str
        Time-varying real columns (NaN = missing cell).
    covariates : sequence of str
        Time-invariant real columns.
    clusters : sequence of str
        Time-invariant categorical columns (e.g. county, hundred).
    """

    frame: pd.DataFrame
    outcomes: tuple = ()
    covariates: tuple = ()
    clusters: tuple = ()

    def __post_init__(self):
        missing = [c for c in REQUIRED_COLUMNS if c not in self.frame.columns]
        for c in (*self.outcomes, *self.covariates, *self.clusters):
            if c not in self.frame.columns:
                missing.append(c)
        if missing:
            raise RailpanelError("SCHEMA_ERROR", f"missing column(s): {missing}",
                                 column=missing[0])
        df = self.frame.copy()
        df[UNIT] = df[UNIT].astype(str)
        df[YEAR] = df[YEAR].astype(np.int64)
        for c in (TREAT, LAT, LON, *self.outcomes, *self.covariates):
            df[c] = pd.to_numeric(df[c], errors="raise").astype(float)
        for c in self.clusters:
            df[c] = df[c].astype(str)
        df = df.reset_index(drop=True)
        object.__setattr__(self, "frame", df)
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "clusters", tuple(self.clusters))

    # -- indexing -----------------------------------------------------------

    @cached_property
    def units(self) -> list[str]:
        return sorted(self.frame[UNIT].unique().tolist())

    @cached_property
    def periods(self) -> list[int]:
        return sorted(int(y) for y in self.frame[YEAR].unique())

    @cached_property
    def _codes(self):
        u = np.searchsorted(np.array(self.units, dtype=object), self.frame[UNIT].to_numpy())
        t = np.searchsorted(np.array(self.periods), self.frame[YEAR].to_numpy())
        return u.astype(np.int64), t.astype(np.int64)

    @property
    def unit_codes(self) -> np.ndarray:
        return self._codes[0]

    @property
    def period_codes(self) -> np.ndarray:
        return self._codes[1]

    @property
    def n_units(self) -> int:
        return len(self.units)

    def __len__(self):
        return len(self.frame)

    @cached_property
    def unit_table(self) -> pd.DataFrame:
        """One row per unit (first row wins) indexed by ``unit_id``."""
        cols = [UNIT, TREAT, LAT, LON, *self.covariates, *self.clusters]
        first = self.frame[cols].groupby(UNIT, sort=True).first()
        # groupby().first() skips NaN; a unit is never-treated only if every row says so
        return first.reindex(self.units)

    @cached_property
    def schedule(self) -> TreatmentSchedule:
        years = self.frame.groupby(UNIT)[TREAT].min().reindex(self.units)
        return TreatmentSchedule({u: (None if np.isnan(y) else int(y))
                                  for u, y in years.items()})

    def wide(self, column: str) -> np.ndarray:
        """Dense (n_units, n_periods) matrix of a row column; NaN where absent."""
        out = np.full((self.n_units, len(self.periods)), np.nan)
        out[self.unit_codes, self.period_codes] = self.frame[column].to_numpy(float)
        return out

    def cohorts(self) -> np.ndarray:
        """Per-unit cohort period (first panel period >= connection year), NaN if never."""
        years = self.unit_table[TREAT].to_numpy(float)
        periods = np.asarray(self.periods, dtype=float)
        idx = np.searchsorted(periods, years, side="left")
        out = np.full(len(years), np.nan)
        ok = ~np.isnan(years) & (idx < len(periods))
        out[ok] = periods[idx[ok]]
        return out

    def treatment_indicator(self) -> np.ndarray:
        """Row-level D(i,t) = 1[t >= treatment year]."""
        ty = self.frame[TREAT].to_numpy(float)
        with np.errstate(invalid="ignore"):
            return (self.frame[YEAR].to_numpy(float) >= ty).astype(float)

    def covariate(self, name: str) -> np.ndarray:
        return self.unit_table[name].to_numpy(float)

    def select_units(self, units: Iterable[str]) -> "PanelDataset":
        keep = self.frame[UNIT].isin(set(units))
        return PanelDataset(self.frame.loc[keep], self.outcomes, self.covariates, self.clusters)

    def with_frame(self, frame: pd.DataFrame) -> "PanelDataset":
        return PanelDataset(frame, self.outcomes, self.covariates, self.clusters)


def validate_panel(ds: PanelDataset, require_coords: bool = False) -> ValidationReport:
    """Check structural assumptions shared by every estimator.

    Error codes: ``DUPLICATE_ROW``, ``NON_ABSORBING``, ``PERIODS_UNORDERED``,
    ``MISSING_COORDS`` (only with ``require_coords``), ``BAD_COORDS``,
    ``MISSING_COVARIATE``, ``COVARIATE_VARIES``, ``CLUSTER_VARIES``.
    """
    errors, warnings = [], []
    df = ds.frame

    dup = df.duplicated([UNIT, YEAR], keep="first")
    for _, row in df.loc[dup].iterrows():
        errors.append(("DUPLICATE_ROW", row[UNIT], int(row[YEAR]),
                       "more than one row for this unit-period"))

    for unit, years in df.groupby(UNIT, sort=True)[YEAR]:
        y = years.to_numpy()
        if np.any(np.diff(y) < 0):
            errors.append(("PERIODS_UNORDERED", unit, None,
                           "rows are not in ascending period order"))

    d = ds.treatment_indicator()
    order = df.sort_values([UNIT, YEAR], kind="stable").index
    sd = pd.DataFrame({UNIT: df.loc[order, UNIT].to_numpy(), YEAR: df.loc[order, YEAR].to_numpy(),
                       "d": d[order]})
    drops = sd.groupby(UNIT, sort=False)["d"].diff() < 0
    for _, row in sd.loc[drops].iterrows():
        errors.append(("NON_ABSORBING", row[UNIT], int(row[YEAR]),
                       "treatment switches off after switching on"))
    n_years = df.groupby(UNIT)[TREAT].nunique(dropna=False)
    for unit in n_years.index[n_years > 1]:
        if unit not in {e[1] for e in errors if e[0] == "NON_ABSORBING"}:
            warnings.append(("INCONSISTENT_TREATMENT_YEAR", unit, None,
                             "treatment_year differs across rows; earliest is used"))

    lat, lon = df[LAT].to_numpy(float), df[LON].to_numpy(float)
    bad = (np.abs(lat) > 90) | (np.abs(lon) > 180)
    for i in np.flatnonzero(bad):
        errors.append(("BAD_COORDS", df.at[i, UNIT], int(df.at[i, YEAR]),
                       f"coordinates out of range: ({lat[i]}, {lon[i]})"))
    no_xy = np.isnan(lat) | np.isnan(lon)
    if no_xy.any():
        target = errors if require_coords else warnings
        for unit in sorted(set(df.loc[no_xy, UNIT])):
            target.append(("MISSING_COORDS", unit, None, "unit has no coordinates"))

    for c in ds.covariates:
        if df[c].isna().any():
            for unit in sorted(set(df.loc[df[c].isna(), UNIT])):
                errors.append(("MISSING_COVARIATE", unit, None, f"covariate {c!r} is missing"))
        varies = df.groupby(UNIT)[c].nunique() > 1
        for unit in varies.index[varies]:
            errors.append(("COVARIATE_VARIES", unit, None, f"covariate {c!r} is not time-invariant"))
    for c in ds.clusters:
        varies = df.groupby(UNIT)[c].nunique() > 1
        for unit in varies.index[varies]:
            errors.append(("CLUSTER_VARIES", unit, None, f"cluster label {c!r} changes over time"))

    if not ds.schedule.never_treated:
        warnings.append(("NO_NEVER_TREATED", None, None,
                         "no never-treated units; group-time estimation is impossible"))
    return ValidationReport(errors, warnings)


def complete_cases(ds: PanelDataset, outcome: str) -> PanelDataset:
    """Sub-panel of units observed (non-missing ``outcome``) in every period."""
    if outcome not in ds.frame.columns:
        raise RailpanelError("SCHEMA_ERROR", f"unknown outcome {outcome!r}", column=outcome)
    y = ds.wide(outcome)
    keep = ~np.isnan(y).any(axis=1)
    if not keep.any():
        raise RailpanelError("EMPTY_RESULT", f"no unit is observed in all periods for {outcome!r}")
    if keep.all():
        return ds
    units = [u for u, k in zip(ds.units, keep) if k]
    log.info("complete_cases(%s): kept %d of %d units", outcome, len(units), ds.n_units)
    return ds.select_units(units)


def event_time(ds: PanelDataset, unit: str, t: int) -> int | None:
    """Calendar years since first treatment, ``None`` for never-treated units."""
    if unit not in ds.schedule:
        raise RailpanelError("UNKNOWN_UNIT", f"unit {unit!r} not in panel", unit=unit)
    first = ds.schedule.first_treated[unit]
    return None if first is None else int(t) - first


# -- CSV --------------------------------------------------------------------

def read_panel_csv(path, outcomes=None, covariates=(), clusters=None) -> PanelDataset:
    """Load the panel CSV schema.

    Columns not named as covariates or clusters are treated as outcomes
    unless ``outcomes`` is given explicitly.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={UNIT: str}, keep_default_na=False,
                         na_values=[""], encoding="utf-8", float_precision="round_trip")
    except pd.errors.ParserError as exc:
        raise RailpanelError("PARSE_ERROR", str(exc), file=str(path)) from exc
    except pd.errors.EmptyDataError as exc:
        raise RailpanelError("EMPTY_RESULT", f"{path} is empty", file=str(path)) from exc
    for c in REQUIRED_COLUMNS:
        if c not in df.columns:
            raise RailpanelError("SCHEMA_ERROR", f"{path}: required column {c!r} missing",
                                 file=str(path), column=c)
    if clusters is None:
        clusters = [c for c in DEFAULT_CLUSTERS if c in df.columns]
    covariates = list(covariates)
    if outcomes is None:
        taken = set(REQUIRED_COLUMNS) | set(clusters) | set(covariates)
        outcomes = [c for c in df.columns if c not in taken]
    for c in [*outcomes, *covariates]:
        if c not in df.columns:
            raise RailpanelError("SCHEMA_ERROR", f"{path}: column {c!r} missing",
                                 file=str(path), column=c)
        if not pd.api.types.is_numeric_dtype(df[c]):
            bad = pd.to_numeric(df[c], errors="coerce").isna() & df[c].notna()
            line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise RailpanelError("PARSE_ERROR", f"{path}:{line}: non-numeric value in {c!r}",
                                 file=str(path), line=line, column=c)
    if df.empty:
        raise RailpanelError("EMPTY_RESULT", f"{path} has no rows", file=str(path))
    return PanelDataset(df, tuple(outcomes), tuple(covariates), tuple(clusters))


def write_panel_csv(ds: PanelDataset, path) -> None:
    cols = [*REQUIRED_COLUMNS, *ds.clusters, *ds.outcomes, *ds.covariates]
    df = ds.frame[cols].copy()
    df[TREAT] = df[TREAT].map(lambda v: "" if np.isnan(v) else str(int(v)))
    df.to_csv(path, index=False, na_rep="", lineterminator="\n")
