"""Two-way fixed effects with decile x period and county x period controls."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import pandas as pd

from railpanel.errors import RailpanelError
from railpanel.panel import LAT, LON, UNIT, PanelDataset
from railpanel.regress import absorbed_dof, demean, is_nested, ols
from railpanel.variance import VcovSpec, normal_pvalue, sandwich_vcov, stars

UNIT_ALIASES = {"unit", "unit_id", "parish"}

ABSORBED_TOL = 1e-9


@dataclass(frozen=True)
class ControlSpec:
    """Control set for the TWFE regression.

    ``decile_vars`` are unit-level covariates binned into deciles and
    interacted with period; ``linear_vars`` are row-level columns entering
    linearly. ``none_flag`` keeps only unit and period effects.
    """

    decile_vars: tuple = ()
    county_period: bool = True
    county: str = "county"
    linear_vars: tuple = ()
    none_flag: bool = False

    @classmethod
    def none(cls):
        return cls(none_flag=True, county_period=False)


@dataclass
class EstimateRow:
    outcome: str
    estimator: str
    vcov: str
    estimate: float
    se: float
    p_value: float
    stars: str
    n_obs: int
    mean_outcome: float
    n_clusters: int | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d.pop("extra")
        return d


def decile_bins(values, k: int = 10) -> np.ndarray:
    """Quantile bins 1..k using inverse-ECDF cut points.

    Bin ``b`` holds values in ``(q[(b-1)/k], q[b/k]]`` where ``q[p]`` is the
    smallest sample value whose ECDF reaches ``p``. Ties land in the lowest
    feasible bin.
    """
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if n == 0:
        return np.zeros(0, dtype=int)
    s = np.sort(v)
    # ceil(n*b/k) in integer arithmetic
    idx = np.array([-(-n * b // k) - 1 for b in range(1, k + 1)])
    cuts = s[idx]
    return np.searchsorted(cuts, v, side="left") + 1


def resolve_clusters(ds: PanelDataset, label: str, rows=None):
    if label in UNIT_ALIASES:
        out = ds.frame[UNIT].to_numpy()
    elif label in ds.frame.columns:
        out = ds.frame[label].astype(str).to_numpy()
    else:
        raise RailpanelError("SCHEMA_ERROR", f"unknown cluster label {label!r}", column=label)
    return out if rows is None else out[rows]


def twfe_factors(ds: PanelDataset, controls: ControlSpec, rows=None) -> dict:
    """Fixed-effect factor labels (row-aligned) implied by ``controls``."""
    u = ds.unit_codes
    t = ds.period_codes
    factors = {"unit": u, "period": t}
    if not controls.none_flag:
        n_t = len(ds.periods)
        if controls.county_period:
            if controls.county not in ds.frame.columns:
                raise RailpanelError("SCHEMA_ERROR", f"no {controls.county!r} column for "
                                     "county x period effects", column=controls.county)
            cc, _ = pd.factorize(ds.frame[controls.county].astype(str), sort=True)
            factors["county_period"] = cc * n_t + t
        for var in controls.decile_vars:
            if var not in ds.covariates:
                raise RailpanelError("SCHEMA_ERROR", f"decile variable {var!r} is not a covariate",
                                     column=var)
            bins = decile_bins(ds.covariate(var))
            factors[f"{var}_decile_period"] = bins[u] * n_t + t
    if rows is not None:
        factors = {name: f[rows] for name, f in factors.items()}
    return factors


def estimate_twfe(ds: PanelDataset, outcome: str, controls: ControlSpec | None = None,
                  vcov: VcovSpec | None = None, tol: float = 1e-12,
                  max_iter: int = 100_000) -> EstimateRow:
    """Coefficient on the treatment indicator after absorbing fixed effects.

    Uses every row with a non-missing ``outcome``. ``tol`` is relative to
    the largest absolute value in the data being demeaned.
    """
    controls = controls or ControlSpec()
    vcov = vcov or VcovSpec("CLUSTER", cluster="unit")
    if outcome not in ds.frame.columns:
        raise RailpanelError("SCHEMA_ERROR", f"unknown outcome {outcome!r}", column=outcome)
    y_all = ds.frame[outcome].to_numpy(float)
    rows = np.flatnonzero(~np.isnan(y_all))
    if rows.size == 0:
        raise RailpanelError("EMPTY_RESULT", f"outcome {outcome!r} is entirely missing")
    y = y_all[rows]
    d = ds.treatment_indicator()[rows]
    if not d.any():
        raise RailpanelError("NO_TREATED", "no treated observations; TWFE coefficient is undefined")

    factors = twfe_factors(ds, controls, rows)
    cols = [d]
    names = ["treated"]
    if not controls.none_flag:
        for c in controls.linear_vars:
            cols.append(ds.frame[c].to_numpy(float)[rows])
            names.append(c)
    data = np.column_stack([y, *cols])
    scale = max(1.0, float(np.abs(data).max()))
    tilde = demean(data, list(factors.values()), tol=tol * scale, max_iter=max_iter)
    # regressors that the fixed effects absorb leave only round-off behind
    centred = np.linalg.norm(data[:, 1:] - data[:, 1:].mean(axis=0), axis=0)
    residual = np.linalg.norm(tilde[:, 1:], axis=0)
    tilde[:, 1 + np.flatnonzero(residual <= ABSORBED_TOL * centred)] = 0.0
    absorbed = absorbed_dof(list(factors.values()))
    fit = ols(tilde[:, 1:], tilde[:, 0], names=names, absorbed_dof=absorbed)
    if "treated" not in fit.names:
        raise RailpanelError("ALL_COLLINEAR", "treatment is absorbed by the fixed effects")

    clusters = None
    coords = None
    k = None
    n_clusters = None
    if vcov.scheme == "CLUSTER":
        clusters = resolve_clusters(ds, vcov.cluster, rows)
        n_clusters = int(len(np.unique(clusters)))
        free = [f for f in factors.values() if not is_nested(f, clusters)]
        k = len(fit.names) + absorbed_dof(free)
    elif vcov.scheme == "CONLEY":
        coords = (ds.frame[LAT].to_numpy(float)[rows], ds.frame[LON].to_numpy(float)[rows])
    V = sandwich_vcov(fit, vcov, clusters=clusters, coords=coords, k=k)
    j = fit.names.index("treated")
    est = float(fit.params[j])
    se = float(np.sqrt(V[j, j]))
    p = normal_pvalue(est, se)
    return EstimateRow(
        outcome=outcome, estimator="twfe", vcov=vcov.label, estimate=est, se=se,
        p_value=p, stars=stars(p), n_obs=int(rows.size), mean_outcome=float(y.mean()),
        n_clusters=n_clusters,
        extra={"fit": fit, "absorbed_dof": absorbed, "dropped": fit.dropped_columns},
    )
