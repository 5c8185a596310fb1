"""Sandwich variance estimators (HC1, CR1, Conley spatial HAC) and Mammen weights."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from scipy.stats import norm

from railpanel.errors import RailpanelError
from railpanel.spatial import haversine_km, km_to_chord, to_unit_sphere

log = logging.getLogger(__name__)

PSD_TOL = -1e-10
SQRT5 = np.sqrt(5.0)
MAMMEN_LOW = (1 - SQRT5) / 2
MAMMEN_HIGH = (1 + SQRT5) / 2
MAMMEN_P_LOW = (SQRT5 + 1) / (2 * SQRT5)


@dataclass(frozen=True)
class VcovSpec:
    scheme: str = "HC1"
    cluster: str | None = None
    cutoff_km: float | None = None
    kernel: str = "uniform"

    def __post_init__(self):
        scheme = self.scheme.upper()
        object.__setattr__(self, "scheme", scheme)
        if scheme not in {"HC1", "CLUSTER", "CONLEY"}:
            raise RailpanelError("BAD_VCOV", f"unknown variance scheme {self.scheme!r}")
        if scheme == "CLUSTER" and not self.cluster:
            raise RailpanelError("BAD_VCOV", "CLUSTER needs a cluster label")
        if scheme == "CONLEY":
            if self.cutoff_km is None or not self.cutoff_km > 0:
                raise RailpanelError("BAD_VCOV", "CONLEY needs a positive cutoff_km")
            if self.kernel not in {"uniform", "bartlett"}:
                raise RailpanelError("BAD_VCOV", f"unknown Conley kernel {self.kernel!r}")

    @classmethod
    def parse(cls, text: str) -> "VcovSpec":
        """Parse ``hc1``, ``cluster:<label>`` or ``conley:<km>[:<kernel>]``."""
        parts = str(text).strip().split(":")
        head = parts[0].upper()
        if head == "HC1" and len(parts) == 1:
            return cls("HC1")
        if head == "CLUSTER" and len(parts) == 2:
            return cls("CLUSTER", cluster=parts[1])
        if head == "CONLEY" and len(parts) in (2, 3):
            kernel = parts[2] if len(parts) == 3 else "uniform"
            return cls("CONLEY", cutoff_km=float(parts[1]), kernel=kernel)
        raise RailpanelError("BAD_VCOV", f"cannot parse variance spec {text!r}")

    @property
    def label(self) -> str:
        if self.scheme == "CLUSTER":
            return f"cluster:{self.cluster}"
        if self.scheme == "CONLEY":
            km = f"{self.cutoff_km:g}"
            return f"conley:{km}" + ("" if self.kernel == "uniform" else f":{self.kernel}")
        return "hc1"


def conley_kernel(d, cutoff_km, kernel="uniform"):
    d = np.asarray(d, dtype=float)
    if kernel == "uniform":
        return (d <= cutoff_km).astype(float)
    return np.maximum(0.0, 1.0 - d / cutoff_km)


def cluster_meat(scores, clusters):
    codes, _ = pd.factorize(np.asarray(clusters), sort=True)
    if np.any(codes < 0):
        raise RailpanelError("MISSING_CLUSTER", "missing cluster labels")
    sums = np.zeros((codes.max() + 1, scores.shape[1]))
    np.add.at(sums, codes, scores)
    return sums.T @ sums, sums.shape[0]


def conley_meat(scores, lat, lon, cutoff_km, kernel="uniform"):
    """Sum over row pairs of K(d_ij) s_i s_j'.

    Rows sharing a location are pooled first (K(0) = 1), then neighbouring
    locations are found with a KD-tree on the unit sphere.
    """
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if np.any(np.isnan(lat)) or np.any(np.isnan(lon)):
        raise RailpanelError("MISSING_COORDS", "Conley variance needs coordinates on every row")
    loc = pd.MultiIndex.from_arrays([lat, lon])
    codes, uniq = pd.factorize(loc, sort=True)
    if len(uniq) == scores.shape[0]:
        # no shared locations; keep row order so the diagonal term is exactly S'S
        s, ulat, ulon = scores, lat, lon
    else:
        s = np.zeros((len(uniq), scores.shape[1]))
        np.add.at(s, codes, scores)
        ulat = uniq.get_level_values(0).to_numpy(float)
        ulon = uniq.get_level_values(1).to_numpy(float)

    meat = s.T @ s
    if len(uniq) > 1:
        tree = cKDTree(to_unit_sphere(ulat, ulon))
        pairs = tree.query_pairs(km_to_chord(cutoff_km) * (1 + 1e-9) + 1e-12, output_type="ndarray")
        if len(pairs):
            a, b = pairs[:, 0], pairs[:, 1]
            k = conley_kernel(haversine_km(ulat[a], ulon[a], ulat[b], ulon[b]), cutoff_km, kernel)
            cross = (s[a] * k[:, None]).T @ s[b]
            meat += cross + cross.T
    return meat


def _finalize(V):
    V = (V + V.T) / 2
    eig, vec = np.linalg.eigh(V)
    if eig.min() < PSD_TOL:
        warnings.warn(f"variance matrix not PSD (min eigenvalue {eig.min():.3e}); "
                      "negative eigenvalues set to zero", RuntimeWarning, stacklevel=3)
        V = (vec * np.maximum(eig, 0.0)) @ vec.T
        V = (V + V.T) / 2
    return V


def sandwich_vcov(fit, spec: VcovSpec, clusters=None, coords=None, k=None):
    """Sandwich covariance of ``fit.params``.

    Parameters
    ----------
    fit : FitResult
    spec : VcovSpec
    clusters : array (n,), required for CLUSTER
    coords : tuple (lat, lon) of arrays (n,), required for CONLEY
    k : int, optional
        Parameter count in the small-sample factors; defaults to
        ``fit.n_params`` (retained columns plus absorbed fixed effects).

    Small-sample factors: HC1 ``n/(n-k)``; CR1 ``G/(G-1) * (n-1)/(n-k)``;
    Conley none.
    """
    S = fit.scores
    n = S.shape[0]
    k = fit.n_params if k is None else int(k)
    B = fit.bread
    if not np.all(np.isfinite(B)):
        raise RailpanelError("SINGULAR_BREAD", "bread matrix is not invertible")
    if spec.scheme == "HC1":
        meat = S.T @ S * (n / (n - k))
    elif spec.scheme == "CLUSTER":
        if clusters is None:
            raise RailpanelError("MISSING_CLUSTER", f"cluster labels {spec.cluster!r} not supplied")
        meat, G = cluster_meat(S, clusters)
        if G < 2:
            raise RailpanelError("TOO_FEW_CLUSTERS", "cluster-robust variance needs >= 2 clusters")
        meat = meat * (G / (G - 1)) * ((n - 1) / (n - k))
    else:
        if coords is None:
            raise RailpanelError("MISSING_COORDS", "Conley variance needs coordinates")
        meat = conley_meat(S, coords[0], coords[1], spec.cutoff_km, spec.kernel)
    return _finalize(B @ meat @ B)


def mammen_weights(n: int, seed=None) -> np.ndarray:
    """Two-point Mammen multipliers with mean 0 and variance 1."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    low = rng.random(n) < MAMMEN_P_LOW
    return np.where(low, MAMMEN_LOW, MAMMEN_HIGH)


def normal_pvalue(estimate, se):
    if not se > 0 or not np.isfinite(se):
        return float("nan")
    return float(2 * norm.sf(abs(estimate / se)))


def stars(p) -> str:
    if p is None or not np.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.10 else ""
