"""Balance regressions, KS tests, summary statistics and kernel densities."""

from __future__ import annotations

import numpy as np
import pandas as pd
from scipy.special import kolmogorov

from railpanel.errors import RailpanelError
from railpanel.regress import ols
from railpanel.variance import VcovSpec, normal_pvalue, sandwich_vcov, stars


def balance_regression(values, ever_treated, vcov: VcovSpec | None = None):
    """OLS of ``values`` on an intercept and an ever-treated indicator.

    Returns ``(coef, se, stars)``; ``coef`` is the treated-minus-never
    difference in means. Missing values are dropped.
    """
    y = np.asarray(values, dtype=float)
    d = np.asarray(ever_treated, dtype=float)
    ok = ~np.isnan(y)
    y, d = y[ok], d[ok]
    if d.min(initial=1) == d.max(initial=0) or y.size < 3:
        raise RailpanelError("NO_VARIATION", "need both ever-treated and never-treated units")
    fit = ols(np.column_stack([np.ones_like(d), d]), y, names=["const", "ever_connected"])
    V = sandwich_vcov(fit, vcov or VcovSpec("HC1"))
    coef, se = float(fit.params[1]), float(np.sqrt(V[1, 1]))
    return coef, se, stars(normal_pvalue(coef, se))


def ks_test(x0, x1):
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    a = np.sort(np.asarray(x0, dtype=float))
    b = np.sort(np.asarray(x1, dtype=float))
    a, b = a[~np.isnan(a)], b[~np.isnan(b)]
    if a.size == 0 or b.size == 0:
        raise RailpanelError("EMPTY_SAMPLE", "both samples must be non-empty")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    D = float(np.max(np.abs(fa - fb)))
    en = a.size * b.size / (a.size + b.size)
    p = float(kolmogorov(np.sqrt(en) * D)) if D > 0 else 1.0
    return D, min(1.0, max(0.0, p))


def summary_stats(ds, vars) -> pd.DataFrame:
    """N, mean, sd (ddof=1), min and max over non-missing panel cells."""
    rows = []
    for v in vars:
        if v not in ds.frame.columns:
            raise RailpanelError("SCHEMA_ERROR", f"unknown variable {v!r}", column=v)
        x = ds.frame[v].to_numpy(float)
        x = x[~np.isnan(x)]
        n = int(x.size)
        rows.append({
            "variable": v, "N": n,
            "mean": float(x.mean()) if n else None,
            "sd": float(x.std(ddof=1)) if n > 1 else None,
            "min": float(x.min()) if n else None,
            "max": float(x.max()) if n else None,
        })
    return pd.DataFrame(rows, columns=["variable", "N", "mean", "sd", "min", "max"])


def silverman_bandwidth(x):
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd
    return 0.9 * spread * x.size ** (-0.2)


def kde_export(values, grid_size: int = 512):
    """Gaussian KDE with Silverman's bandwidth on an even grid.

    The grid spans ``[min - 3h, max + 3h]``. Returns ``(grid, density)``.
    """
    x = np.asarray(values, dtype=float)
    x = x[~np.isnan(x)]
    if x.size < 2 or np.ptp(x) == 0:
        raise RailpanelError("DEGENERATE", "need at least two distinct values")
    h = silverman_bandwidth(x)
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid_size)
    dens = np.zeros(grid_size)
    for start in range(0, x.size, 4096):
        chunk = x[start:start + 4096]
        z = (grid[:, None] - chunk[None, :]) / h
        dens += np.exp(-0.5 * z ** 2).sum(axis=1)
    dens /= x.size * h * np.sqrt(2 * np.pi)
    return grid, dens


def base_cross_section(ds, base_period=None):
    """Units untreated in ``base_period`` (default: first period) and their ever-treated flag.

    Returns ``(frame, ever)`` where ``frame`` holds the base-period rows.
    """
    base = ds.periods[0] if base_period is None else base_period
    rows = ds.frame[ds.frame["year"] == base]
    ty = rows["treatment_year"].to_numpy(float)
    with np.errstate(invalid="ignore"):
        already = ty <= base
    rows = rows.loc[~already]
    ever = ~np.isnan(rows["treatment_year"].to_numpy(float))
    return rows, ever


def balance_table(ds, vars, base_period=None, vcov=None) -> pd.DataFrame:
    rows, ever = base_cross_section(ds, base_period)
    out = []
    for v in vars:
        x = rows[v].to_numpy(float)
        coef, se, st = balance_regression(x, ever, vcov)
        ok = ~np.isnan(x)
        D, p = ks_test(x[ok & ~ever], x[ok & ever])
        out.append({"variable": v, "mean": float(np.nanmean(x)), "sd": float(np.nanstd(x, ddof=1)),
                    "coef": coef, "se": se, "stars": st, "ks_d": D, "ks_p": p,
                    "ks_stars": stars(p), "n_ever": int((ok & ever).sum()),
                    "n_never": int((ok & ~ever).sum())})
    return pd.DataFrame(out)


def cohort_labels(treatment_year, cuts):
    """Label units by connection-year bands.

    ``cuts`` is a list of ``(label, lo, hi)`` with inclusive integer bounds
    (``None`` = open); never-treated units get ``"never"``.
    """
    labels = []
    for y in np.asarray(treatment_year, dtype=float):
        if np.isnan(y):
            labels.append("never")
            continue
        lab = None
        for name, lo, hi in cuts:
            if (lo is None or y >= lo) and (hi is None or y <= hi):
                lab = name
                break
        labels.append(lab)
    return labels


def density_table(ds, vars, groups, base_period=None, grid_size=512) -> pd.DataFrame:
    """Long table ``(variable, group, grid, density)`` for plotting densities by group.

    ``groups`` is ``"ever"`` (ever vs never connected) or a list of cohort
    cut points as accepted by :func:`cohort_labels`.
    """
    rows, ever = base_cross_section(ds, base_period)
    if groups == "ever":
        labels = np.where(ever, "ever", "never")
    else:
        labels = np.array(cohort_labels(rows["treatment_year"], groups), dtype=object)
    frames = []
    for v in vars:
        x = rows[v].to_numpy(float)
        for lab in sorted({l for l in labels if l is not None}):
            sel = x[(labels == lab) & ~np.isnan(x)]
            if sel.size < 2 or np.ptp(sel) == 0:
                continue
            grid, dens = kde_export(sel, grid_size)
            frames.append(pd.DataFrame({"variable": v, "group": lab, "grid": grid, "density": dens}))
    if not frames:
        return pd.DataFrame(columns=["variable", "group", "grid", "density"])
    return pd.concat(frames, ignore_index=True)
