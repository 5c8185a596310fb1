"""Group-time average treatment effects with never-treated controls.

Each ATT(g, t) is a 2x2 difference-in-differences between cohort ``g`` and
the never-treated units, comparing period ``t`` with a base period: the last
period before ``g`` for post-treatment cells and the period just before
``t`` for pre-treatment (placebo) cells. Cells carry per-unit influence
values so that aggregations and bootstrap bands can be formed by linear
combination.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import norm

from railpanel.errors import RailpanelError
from railpanel.panel import UNIT, PanelDataset, complete_cases
from railpanel.regress import independent_columns
from railpanel.twfe import EstimateRow, resolve_clusters
from railpanel.variance import VcovSpec, mammen_weights, normal_pvalue, stars

log = logging.getLogger(__name__)

SIMPLE = "simple"
OUTCOME_REGRESSION = "outcome_regression"
Z975 = float(norm.ppf(0.975))


@dataclass
class GroupTimeCell:
    g: int
    t: int
    base: int
    att: float
    se: float
    n_treated: int
    n_control: int
    influence: np.ndarray = field(repr=False)

    @property
    def event_time(self) -> int:
        return self.t - self.g

    @property
    def post(self) -> bool:
        return self.t >= self.g


@dataclass
class GroupTimeResult:
    """All ATT(g, t) cells for one outcome plus what aggregation needs."""

    outcome: str
    cells: list
    units: list
    cohorts: np.ndarray
    periods: list
    method: str
    n_obs: int
    mean_outcome: float
    panel: PanelDataset = field(repr=False)

    @property
    def n_units(self) -> int:
        return len(self.units)

    def cohort_sizes(self) -> dict:
        gs, counts = np.unique(self.cohorts[~np.isnan(self.cohorts)], return_counts=True)
        return {int(g): int(c) for g, c in zip(gs, counts)}

    def cell(self, g, t) -> GroupTimeCell:
        for c in self.cells:
            if c.g == g and c.t == t:
                return c
        raise KeyError((g, t))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{"outcome": self.outcome, "g": c.g, "t": c.t, "base": c.base,
                              "event_time": c.event_time, "att": c.att, "se": c.se,
                              "n_treated": c.n_treated, "n_control": c.n_control}
                             for c in self.cells])


@dataclass
class EventPoint:
    event_time: int
    estimate: float
    se: float
    lo95: float
    hi95: float
    band_lo: float
    band_hi: float
    se_bootstrap: float = float("nan")


@dataclass
class EventStudySeries:
    points: list
    band_critical: float
    influence: np.ndarray = field(repr=False, default=None)

    def to_frame(self, outcome=None) -> pd.DataFrame:
        rows = [{"event_time": p.event_time, "estimate": p.estimate, "se": p.se,
                 "lo95": p.lo95, "hi95": p.hi95, "band_lo": p.band_lo, "band_hi": p.band_hi}
                for p in self.points]
        df = pd.DataFrame(rows, columns=["event_time", "estimate", "se", "lo95", "hi95",
                                         "band_lo", "band_hi"])
        if outcome is not None:
            df.insert(0, "outcome", outcome)
        return df


# -- cell estimation ----------------------------------------------------------

def base_period(periods, g, t):
    """Base period: last period before ``g`` (post cells) or before ``t`` (pre cells)."""
    ref = g if t >= g else t
    earlier = [p for p in periods if p < ref]
    if not earlier:
        raise RailpanelError("NO_BASE_PERIOD", f"no period before {ref} for cell (g={g}, t={t})")
    return max(earlier)


def _cell(Y, periods, cohorts, g, t, X=None, method=SIMPLE):
    n = Y.shape[0]
    treat = cohorts == g
    ctrl = np.isnan(cohorts)
    n_g, n_c = int(treat.sum()), int(ctrl.sum())
    if n_c == 0:
        raise RailpanelError("NO_NEVER_TREATED", "no never-treated units in the comparison group")
    if n_g == 0:
        raise RailpanelError("EMPTY_COHORT", f"cohort {g} has no units")
    b = base_period(periods, g, t)
    ti, bi = periods.index(t), periods.index(b)
    dy_all = Y[:, ti] - Y[:, bi]

    sub = treat | ctrl
    m = int(sub.sum())
    dy = dy_all[sub]
    D = treat[sub].astype(float)
    if method == SIMPLE or X is None:
        mg, mc = dy[D == 1].mean(), dy[D == 0].mean()
        att = mg - mc
        inf = D / (n_g / m) * (dy - mg) - (1 - D) / (n_c / m) * (dy - mc)
    elif method == OUTCOME_REGRESSION:
        Z = np.column_stack([np.ones(m), X[sub]])
        keep = independent_columns(Z[D == 0])
        Z = Z[:, keep]
        coef = np.linalg.lstsq(Z[D == 0], dy[D == 0], rcond=None)[0]
        fitted = Z @ coef
        w = D
        eta_t = np.mean(w * dy) / np.mean(w)
        eta_c = np.mean(w * fitted) / np.mean(w)
        att = eta_t - eta_c
        wo = 1 - D
        xpx_inv = np.linalg.inv((Z * wo[:, None]).T @ Z / m)
        lin_rep = (Z * (wo * (dy - fitted))[:, None]) @ xpx_inv
        inf_treat = (w * dy - w * eta_t) / np.mean(w)
        m1 = np.mean(Z * w[:, None], axis=0)
        inf_ctrl = ((w * fitted - w * eta_c) + lin_rep @ m1) / np.mean(w)
        inf = inf_treat - inf_ctrl
    else:
        raise RailpanelError("BAD_METHOD", f"unknown estimation method {method!r}")

    influence = np.zeros(n)
    influence[sub] = inf * (n / m)
    se = float(np.sqrt(np.sum(influence ** 2)) / n)
    return GroupTimeCell(g=int(g), t=int(t), base=int(b), att=float(att), se=se,
                         n_treated=n_g, n_control=n_c, influence=influence)


def _prepare(ds: PanelDataset, outcome: str, covariates=()):
    cc = complete_cases(ds, outcome)
    n_obs = len(cc.frame)
    mean_outcome = float(cc.frame[outcome].mean())
    periods = cc.periods
    cohorts = cc.cohorts()
    always = cohorts == periods[0]
    if always.any():
        log.info("%s: dropping %d unit(s) already treated in the first period",
                 outcome, int(always.sum()))
        cc = cc.select_units([u for u, a in zip(cc.units, always) if not a])
        cohorts = cc.cohorts()
    Y = cc.wide(outcome)
    X = None
    if covariates:
        X = np.column_stack([cc.covariate(c) for c in covariates])
        if np.isnan(X).any():
            raise RailpanelError("MISSING_COVARIATE", "covariates contain missing values")
    return cc, Y, cohorts, X, n_obs, mean_outcome


def _method(covariates, method):
    if method is None:
        return OUTCOME_REGRESSION if covariates else SIMPLE
    return method


def att_gt(ds: PanelDataset, outcome: str, g: int, t: int, covariates=(),
           method: str | None = None) -> GroupTimeCell:
    """Single ATT(g, t) cell on the complete-case panel for ``outcome``."""
    covariates = tuple(covariates or ())
    cc, Y, cohorts, X, _, _ = _prepare(ds, outcome, covariates)
    if g not in cc.periods or t not in cc.periods:
        raise RailpanelError("BAD_CELL", f"(g={g}, t={t}) not on the period grid")
    return _cell(Y, cc.periods, cohorts, g, t, X, _method(covariates, method))


def estimate_group_time(ds: PanelDataset, outcome: str, covariates=(),
                        method: str | None = None) -> GroupTimeResult:
    """Every identifiable ATT(g, t) for ``outcome``.

    Cohorts are first panel periods at or after the connection year; units
    connected after the last period count as never treated, units treated
    in the first period are dropped.
    """
    covariates = tuple(covariates or ())
    method = _method(covariates, method)
    cc, Y, cohorts, X, n_obs, mean_outcome = _prepare(ds, outcome, covariates)
    periods = cc.periods
    if not np.isnan(cohorts).any():
        raise RailpanelError("NO_NEVER_TREATED", "no never-treated units in the comparison group")
    groups = sorted(int(g) for g in np.unique(cohorts[~np.isnan(cohorts)]))
    if not groups:
        raise RailpanelError("NO_CELLS", "no treated cohort with a pre-treatment period")
    cells = [_cell(Y, periods, cohorts, g, t, X, method) for g in groups for t in periods[1:]]
    return GroupTimeResult(outcome=outcome, cells=cells, units=list(cc.units), cohorts=cohorts,
                           periods=periods, method=method, n_obs=n_obs,
                           mean_outcome=mean_outcome, panel=cc)


# -- aggregation --------------------------------------------------------------

def weighted_combination(atts, influences, unit_cohorts, cell_groups):
    """Cohort-share weighted average of cell effects with its influence function.

    ``cell_groups[j]`` is the cohort of the j-th input. Weights are cohort
    shares renormalized over the inputs; the influence function includes the
    estimation error of the shares.
    """
    atts = np.asarray(atts, dtype=float)
    cell_groups = np.asarray(cell_groups)
    n = unit_cohorts.shape[0]
    ind = np.column_stack([unit_cohorts == g for g in cell_groups]).astype(float)
    pg = ind.mean(axis=0)
    S = pg.sum()
    w = pg / S
    est = float(w @ atts)
    inf = np.asarray(influences) @ w if len(atts) else np.zeros(n)
    centred = ind - pg
    wif = centred / S - np.outer(centred.sum(axis=1), pg) / S ** 2
    inf = inf + wif @ atts
    return est, inf, w


def aggregation_weights(atts_by_cell: dict, shares: dict) -> float:
    """Overall effect from cell values and cohort shares (no data needed).

    Same formula as :func:`aggregate_overall`: the share-weighted average
    over cohorts of each cohort's mean post-treatment effect.
    """
    by_g = {}
    for (g, t), v in atts_by_cell.items():
        if t >= g:
            by_g.setdefault(g, []).append(v)
    if not by_g:
        raise RailpanelError("NO_CELLS", "no post-treatment cells")
    gs = sorted(by_g)
    p = np.array([shares[g] for g in gs], dtype=float)
    theta = np.array([np.mean(by_g[g]) for g in gs])
    return float((p / p.sum()) @ theta)


def se_from_influence(inf, clusters=None):
    n = inf.shape[0]
    if clusters is None:
        return float(np.sqrt(np.sum(inf ** 2)) / n)
    codes, _ = pd.factorize(np.asarray(clusters), sort=True)
    sums = np.bincount(codes, weights=inf)
    return float(np.sqrt(np.sum(sums ** 2)) / n)


def aggregate_overall(res: GroupTimeResult):
    """Overall ATT: cohort-size weighted mean of each cohort's average post effect.

    Returns ``(estimate, se, influence)``.
    """
    post = [c for c in res.cells if c.post]
    if not post:
        raise RailpanelError("NO_CELLS", "no post-treatment cells to aggregate")
    gs = sorted({c.g for c in post})
    theta, infs = [], []
    for g in gs:
        cg = [c for c in post if c.g == g]
        theta.append(np.mean([c.att for c in cg]))
        infs.append(np.mean([c.influence for c in cg], axis=0))
    est, inf, _ = weighted_combination(theta, np.column_stack(infs), res.cohorts, gs)
    return est, se_from_influence(inf), inf


def multiplier_bootstrap(inf, B: int = 999, seed=0, clusters=None, alpha: float = 0.05):
    """Mammen multiplier bootstrap over influence values.

    Parameters
    ----------
    inf : array (n,) or (n, m)
        Per-unit influence values of ``m`` linearized estimators.
    B : int
        Number of draws (>= 99).
    seed : int
        Draw ``b`` uses weights seeded by ``(seed, b)``, so results do not
        depend on evaluation order.
    clusters : array (n,), optional
        Draw one multiplier per cluster.

    Returns
    -------
    se : array (m,)
        Bootstrap standard errors from the rescaled interquartile range.
    crit : float
        ``1 - alpha`` quantile of the sup over estimators of |t|.
    """
    if B < 99:
        raise RailpanelError("BAD_BOOTSTRAP", "need at least 99 bootstrap draws")
    inf = np.asarray(inf, dtype=float)
    if inf.ndim == 1:
        inf = inf[:, None]
    n = inf.shape[0]
    if not np.any(inf):
        raise RailpanelError("DEGENERATE_INFLUENCE", "influence values are all zero")
    if clusters is not None:
        codes, _ = pd.factorize(np.asarray(clusters), sort=True)
        agg = np.zeros((codes.max() + 1, inf.shape[1]))
        np.add.at(agg, codes, inf)
        inf = agg
    n_draw = inf.shape[0]
    seed_int = int(seed) if seed is not None else 0
    V = np.empty((B, n_draw))
    for b in range(B):
        V[b] = mammen_weights(n_draw, np.random.default_rng(np.random.SeedSequence(seed_int, spawn_key=(b,))))
    boot = V @ inf / np.sqrt(n)  # sqrt(n) * (mean of V * IF)
    q75, q25 = np.quantile(boot, [0.75, 0.25], axis=0)
    sigma = (q75 - q25) / (norm.ppf(0.75) - norm.ppf(0.25))
    ok = sigma > np.sqrt(np.finfo(float).eps) * np.abs(boot).max()
    if not ok.any():
        raise RailpanelError("DEGENERATE_INFLUENCE", "bootstrap distribution is degenerate")
    tstat = np.abs(boot[:, ok] / sigma[ok]).max(axis=1)
    crit = float(np.quantile(tstat, 1 - alpha))
    se = np.where(ok, sigma / np.sqrt(n), np.nan)
    return se, crit


def aggregate_event_study(res: GroupTimeResult, B: int = 999, seed=0, clusters=None,
                          alpha: float = 0.05) -> EventStudySeries:
    """Cohort-share weighted ATT by calendar years since treatment.

    Pointwise intervals use the analytic standard error; the uniform band
    uses the sup-t critical value from :func:`multiplier_bootstrap` (never
    below the pointwise one).
    """
    if not res.cells:
        raise RailpanelError("NO_CELLS", "no cells to aggregate")
    es = sorted({c.event_time for c in res.cells})
    est, infs = [], []
    for e in es:
        ce = [c for c in res.cells if c.event_time == e]
        val, inf, _ = weighted_combination([c.att for c in ce],
                                           np.column_stack([c.influence for c in ce]),
                                           res.cohorts, [c.g for c in ce])
        est.append(val)
        infs.append(inf)
    inf = np.column_stack(infs)
    se = np.array([se_from_influence(inf[:, j], clusters) for j in range(len(es))])
    z = float(norm.ppf(1 - alpha / 2))
    if B:
        se_boot, crit = multiplier_bootstrap(inf, B=B, seed=seed, clusters=clusters, alpha=alpha)
    else:
        se_boot, crit = np.full(len(es), np.nan), z
    band = max(crit, z)
    points = [EventPoint(event_time=int(e), estimate=float(v), se=float(s),
                         lo95=float(v - z * s), hi95=float(v + z * s),
                         band_lo=float(v - band * s), band_hi=float(v + band * s),
                         se_bootstrap=float(sb))
              for e, v, s, sb in zip(es, est, se, se_boot)]
    return EventStudySeries(points=points, band_critical=crit, influence=inf)


def estimate_cs(ds: PanelDataset, outcome: str, covariates=(), method: str | None = None,
                vcov: VcovSpec | None = None, result: GroupTimeResult | None = None) -> EstimateRow:
    """Overall group-time ATT as an :class:`EstimateRow`.

    Unit-level (or HC1) inference uses the influence function directly;
    ``CLUSTER`` sums influence values within clusters first.
    """
    vcov = vcov or VcovSpec("CLUSTER", cluster="unit")
    if vcov.scheme == "CONLEY":
        raise RailpanelError("UNSUPPORTED_VCOV", "Conley errors are provided for TWFE only")
    res = result or estimate_group_time(ds, outcome, covariates, method)
    est, se, inf = aggregate_overall(res)
    n_clusters = None
    if vcov.scheme == "CLUSTER":
        labels = resolve_clusters(res.panel, vcov.cluster)
        per_unit = pd.Series(labels).groupby(res.panel.frame[UNIT].to_numpy()).first()
        clusters = per_unit.reindex(res.units).to_numpy()
        se = se_from_influence(inf, clusters)
        n_clusters = int(len(np.unique(clusters)))
    p = normal_pvalue(est, se)
    return EstimateRow(outcome=outcome, estimator="cs", vcov=vcov.label, estimate=est, se=se,
                       p_value=p, stars=stars(p), n_obs=res.n_obs,
                       mean_outcome=res.mean_outcome, n_clusters=n_clusters,
                       extra={"method": res.method, "n_cells": len(res.cells)})
