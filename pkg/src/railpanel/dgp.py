"""Synthetic staggered-adoption panels with known effects, and a Monte Carlo harness."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from railpanel.cs_did import aggregate_overall, aggregation_weights, estimate_group_time
from railpanel.errors import RailpanelError
from railpanel.panel import PanelDataset
from railpanel.spatial import haversine_km
from railpanel.twfe import ControlSpec, estimate_twfe
from railpanel.variance import VcovSpec

NEVER_KEY = "never"
# bounding box of the simulated study area (roughly Denmark)
LAT_RANGE = (54.6, 57.7)
LON_RANGE = (8.1, 12.6)


@dataclass(frozen=True)
class Effect:
    """Treatment effect tau(g, t) for t >= g.

    ``tau + event_slope * (t - g) + cohort_slope * (g - g0)`` where ``g0`` is
    ``cohort_origin`` (years).
    """

    tau: float = 0.0
    event_slope: float = 0.0
    cohort_slope: float = 0.0
    cohort_origin: int = 0

    def __call__(self, g, t):
        return self.tau + self.event_slope * (t - g) + self.cohort_slope * (g - self.cohort_origin)


@dataclass(frozen=True)
class DgpConfig:
    n_units: int = 500
    periods: tuple = (1850, 1860, 1880, 1901)
    cohort_shares: dict = field(default_factory=lambda: {1860: 0.2, 1880: 0.2, 1901: 0.2, None: 0.4})
    effect_fn: object = Effect(0.07)
    unit_fx_sd: float = 1.0
    period_fx: tuple | None = None
    noise_sd: float = 0.1
    selection_on_level: float = 0.0
    covariate_trend: float = 0.0
    spatial_range_km: float | None = None
    n_counties: int = 16
    seed: int = 0

    def __post_init__(self):
        shares = {(None if k in (None, NEVER_KEY, "None") else int(k)): float(v)
                  for k, v in dict(self.cohort_shares).items()}
        object.__setattr__(self, "cohort_shares", shares)
        object.__setattr__(self, "periods", tuple(int(p) for p in self.periods))
        if self.period_fx is not None:
            object.__setattr__(self, "period_fx", tuple(float(v) for v in self.period_fx))
        if any(v < 0 for v in shares.values()) or not math.isclose(sum(shares.values()), 1.0,
                                                                     abs_tol=1e-9):
            raise RailpanelError("BAD_SHARES", f"cohort shares must be >= 0 and sum to 1: {shares}")
        for g in shares:
            if g is not None and g not in self.periods[1:]:
                raise RailpanelError("BAD_SHARES", f"cohort {g} is not a panel period after the first")
        if self.noise_sd < 0 or self.n_units < 1:
            raise RailpanelError("BAD_CONFIG", "noise_sd must be >= 0 and n_units >= 1")
        if self.period_fx is not None and len(self.period_fx) != len(self.periods):
            raise RailpanelError("BAD_CONFIG", "period_fx must have one value per period")

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        d = dict(d)
        eff = d.pop("effect", None)
        if eff is not None:
            d["effect_fn"] = Effect(**eff) if isinstance(eff, dict) else Effect(float(eff))
        if "cohort_shares" in d:
            d["cohort_shares"] = dict(d["cohort_shares"])
        for key in ("periods", "period_fx"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise RailpanelError("BAD_CONFIG", f"unknown simulate keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cohort_shares"] = {(NEVER_KEY if k is None else str(k)): v
                              for k, v in self.cohort_shares.items()}
        eff = self.effect_fn
        d["effect_fn"] = asdict(eff) if isinstance(eff, Effect) else repr(eff)
        d["periods"] = list(self.periods)
        return d


@dataclass
class TruthRecord:
    att: dict
    overall: float | None
    event_study: dict


def true_effects(cfg: DgpConfig) -> TruthRecord:
    """Population ATT(g,t), overall and event-study values implied by ``cfg``."""
    shares = {g: s for g, s in cfg.cohort_shares.items() if g is not None and s > 0}
    att = {(g, t): float(cfg.effect_fn(g, t)) for g in sorted(shares) for t in cfg.periods if t >= g}
    if not att:
        return TruthRecord({}, None, {})
    overall = aggregation_weights(att, shares)
    event = {}
    for g in sorted(shares):
        for t in cfg.periods[1:]:
            e = t - g
            event.setdefault(e, []).append((shares[g], cfg.effect_fn(g, t) if t >= g else 0.0))
    event_study = {e: float(sum(p * v for p, v in vals) / sum(p for p, _ in vals))
                   for e, vals in sorted(event.items())}
    return TruthRecord(att, overall, event_study)


def _grid_labels(lat, lon, n_cells):
    side = max(1, int(math.ceil(math.sqrt(n_cells))))
    iy = np.clip(((lat - LAT_RANGE[0]) / (LAT_RANGE[1] - LAT_RANGE[0]) * side).astype(int), 0, side - 1)
    ix = np.clip(((lon - LON_RANGE[0]) / (LON_RANGE[1] - LON_RANGE[0]) * side).astype(int), 0, side - 1)
    return iy * side + ix


def simulate_panel(cfg: DgpConfig):
    """Draw a balanced panel ``Y_it = a_i + l_t + tau(g_i, t) 1[t >= g_i] + e_it``.

    Returns ``(PanelDataset, TruthRecord)``. The panel has outcome ``y``,
    covariates ``x1, x2`` and cluster labels ``county, hundred``.
    """
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    n, periods = cfg.n_units, list(cfg.periods)
    T = len(periods)
    keys = list(cfg.cohort_shares)
    probs = np.array([cfg.cohort_shares[k] for k in keys])
    pick = rng.choice(len(keys), size=n, p=probs / probs.sum())
    cohort = np.array([np.nan if keys[j] is None else keys[j] for j in pick], dtype=float)
    lat = rng.uniform(*LAT_RANGE, size=n)
    lon = rng.uniform(*LON_RANGE, size=n)
    x = rng.standard_normal((n, 2))

    ever = (~np.isnan(cohort)).astype(float)
    s = (ever - ever.mean()) / ever.std() if ever.std() > 0 else np.zeros(n)
    rho = cfg.selection_on_level
    alpha = cfg.unit_fx_sd * (rho * s + math.sqrt(max(0.0, 1 - rho ** 2)) * rng.standard_normal(n))
    lam = np.array(cfg.period_fx) if cfg.period_fx is not None else 0.1 * np.arange(T)

    if cfg.spatial_range_km and cfg.noise_sd > 0:
        d = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
        L = np.linalg.cholesky(np.exp(-d / cfg.spatial_range_km) + 1e-10 * np.eye(n))
        eps = cfg.noise_sd * (L @ rng.standard_normal((n, T)))
    else:
        eps = cfg.noise_sd * rng.standard_normal((n, T))

    Y = alpha[:, None] + lam[None, :] + eps
    Y += cfg.covariate_trend * x[:, [0]] * np.arange(T)[None, :]
    for i in np.flatnonzero(~np.isnan(cohort)):
        g = int(cohort[i])
        for k, t in enumerate(periods):
            if t >= g:
                Y[i, k] += cfg.effect_fn(g, t)

    width = len(str(n))
    units = np.array([f"u{i:0{width}d}" for i in range(n)])
    frame = pd.DataFrame({
        "unit_id": np.repeat(units, T),
        "year": np.tile(periods, n),
        "treatment_year": np.repeat(cohort, T),
        "lat": np.repeat(lat, T),
        "lon": np.repeat(lon, T),
        "county": np.repeat([f"c{v}" for v in _grid_labels(lat, lon, cfg.n_counties)], T),
        "hundred": np.repeat([f"h{v}" for v in _grid_labels(lat, lon, 4 * cfg.n_counties)], T),
        "y": Y.ravel(),
        "x1": np.repeat(x[:, 0], T),
        "x2": np.repeat(x[:, 1], T),
    })
    ds = PanelDataset(frame, outcomes=("y",), covariates=("x1", "x2"), clusters=("county", "hundred"))
    return ds, true_effects(cfg)


def did_2x2_oracle(ds: PanelDataset, outcome: str, g: int, t: int, base: int) -> float:
    """Four-means 2x2 DiD of cohort ``g`` against never-treated units."""
    df = ds.frame
    periods = sorted(df["year"].unique())
    last = periods[-1]

    def cohort_of(year):
        if np.isnan(year) or year > last:
            return None
        return min(p for p in periods if p >= year)

    unit_year = df.groupby("unit_id")["treatment_year"].min()
    cohort = {u: cohort_of(y) for u, y in unit_year.items()}
    treated = {u for u, c in cohort.items() if c == g}
    never = {u for u, c in cohort.items() if c is None}
    if not treated or not never:
        raise RailpanelError("EMPTY_GROUP", f"cohort {g} or the never-treated group is empty")

    def mean(units, year):
        vals = df.loc[df["unit_id"].isin(units) & (df["year"] == year), outcome]
        return float(vals.sum()) / len(vals)

    return (mean(treated, t) - mean(treated, base)) - (mean(never, t) - mean(never, base))


# -- estimator handles ----------------------------------------------------------

@dataclass(frozen=True)
class CSOverall:
    outcome: str = "y"
    covariates: tuple = ()

    def __call__(self, ds):
        res = estimate_group_time(ds, self.outcome, self.covariates)
        est, se, _ = aggregate_overall(res)
        return est, se


@dataclass(frozen=True)
class TWFEBeta:
    outcome: str = "y"
    controls: ControlSpec = ControlSpec.none()
    vcov: VcovSpec = VcovSpec("CLUSTER", cluster="unit")

    def __call__(self, ds):
        row = estimate_twfe(ds, self.outcome, self.controls, self.vcov)
        return row.estimate, row.se


ESTIMATORS = {"cs": CSOverall, "twfe": TWFEBeta}


def overall_target(truth: TruthRecord):
    return truth.overall


@dataclass
class MonteCarloReport:
    estimator: str
    reps: int
    seed: int
    truth: float
    mean_estimate: float
    bias: float
    mc_se: float | None
    rmse: float
    mean_se: float
    sd_estimate: float | None
    coverage: float | None
    estimates: list = field(default_factory=list, repr=False)
    ses: list = field(default_factory=list, repr=False)

    def to_dict(self, with_draws=False):
        d = asdict(self)
        if not with_draws:
            d.pop("estimates")
            d.pop("ses")
        return d


def rep_seed(seed: int, r: int) -> int:
    """Seed of replication ``r``; independent of execution order."""
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(r),)).generate_state(1)[0])


def _one_rep(estimator, cfg, seed, r, target):
    ds, truth = simulate_panel(replace(cfg, seed=rep_seed(seed, r)))
    est, se = estimator(ds)
    return float(est), float(se), float(target(truth))


def monte_carlo(estimator, cfg: DgpConfig, reps: int, seed: int = 0, target=overall_target,
                n_jobs: int = 1, name: str | None = None) -> MonteCarloReport:
    """Bias, Monte Carlo SE and 95% CI coverage of ``estimator`` over ``reps`` draws.

    ``estimator(ds) -> (estimate, se)``. Replication ``r`` simulates with
    :func:`rep_seed` so serial and parallel runs agree exactly.
    """
    if reps < 1:
        raise RailpanelError("BAD_CONFIG", "reps must be >= 1")
    if n_jobs == 1:
        out = [_one_rep(estimator, cfg, seed, r, target) for r in range(reps)]
    else:
        out = Parallel(n_jobs=n_jobs)(delayed(_one_rep)(estimator, cfg, seed, r, target)
                                      for r in range(reps))
    est = np.array([o[0] for o in out])
    se = np.array([o[1] for o in out])
    truth = np.array([o[2] for o in out])
    err = est - truth
    multi = reps >= 2
    covered = np.abs(err) <= 1.959963984540054 * se
    return MonteCarloReport(
        estimator=name or type(estimator).__name__, reps=reps, seed=int(seed),
        truth=float(truth.mean()), mean_estimate=float(est.mean()), bias=float(err.mean()),
        mc_se=float(err.std(ddof=1) / math.sqrt(reps)) if multi else None,
        rmse=float(np.sqrt(np.mean(err ** 2))), mean_se=float(se.mean()),
        sd_estimate=float(est.std(ddof=1)) if multi else None,
        coverage=float(covered.mean()) if multi else None,
        estimates=est.tolist(), ses=se.tolist(),
    )
