"""Regression engines: OLS/WLS, fixed-effect demeaning and Poisson IRLS."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import gammaln

from railpanel.errors import RailpanelError

log = logging.getLogger(__name__)

COLLINEAR_TOL = 1e-10


@dataclass
class FitResult:
    """Outcome of a fit on the retained (non-collinear) columns.

    ``scores`` holds per-row gradient contributions and ``bread`` the inverse
    Hessian of the objective, so that ``bread @ (scores.T @ scores) @ bread``
    is the heteroskedasticity-robust sandwich.
    """

    names: list
    params: np.ndarray
    dropped_columns: list
    residuals: np.ndarray
    dof_residual: int
    scores: np.ndarray
    bread: np.ndarray
    design: np.ndarray
    fitted: np.ndarray
    log_likelihood: float | None = None
    n_iter: int = 0
    absorbed_dof: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def coefficients(self) -> dict:
        return dict(zip(self.names, self.params.tolist()))

    @property
    def n_obs(self) -> int:
        return self.design.shape[0]

    @property
    def n_params(self) -> int:
        """Parameters charged against the residual degrees of freedom."""
        return self.n_obs - self.dof_residual

    def __getitem__(self, name):
        return self.params[self.names.index(name)]


def _as_design(X, names=None):
    if isinstance(X, pd.DataFrame):
        names = list(X.columns) if names is None else list(names)
        X = X.to_numpy(dtype=float)
    else:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if names is None:
            names = [f"x{j}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValueError("names do not match the number of columns")
    return X, list(names)


def independent_columns(X, tol=COLLINEAR_TOL):
    """Indices of columns kept when scanning left to right.

    A column is dropped when its distance to the span of the columns already
    kept is at most ``tol`` times its own norm (the diagonal of an unpivoted
    QR restricted to kept columns). Re-orthogonalized Gram-Schmidt.
    """
    n, p = X.shape
    Q = np.empty((n, min(n, p)))
    keep = []
    for j in range(p):
        v = X[:, j]
        norm = np.linalg.norm(v)
        if norm == 0.0 or len(keep) == n:
            continue
        r = v.copy()
        if keep:
            Qk = Q[:, :len(keep)]
            r -= Qk @ (Qk.T @ r)
            r -= Qk @ (Qk.T @ r)
        rn = np.linalg.norm(r)
        if rn <= tol * norm:
            continue
        Q[:, len(keep)] = r / rn
        keep.append(j)
    return keep


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise RailpanelError("NONFINITE_INPUT", "non-finite values in regression input")


def ols(X, y, weights=None, names=None, absorbed_dof=0, tol=COLLINEAR_TOL) -> FitResult:
    """(Weighted) least squares with deterministic collinearity dropping.

    Parameters
    ----------
    X : array (n, p) or DataFrame
    y : array (n,)
    weights : array (n,), optional
        Positive observation weights; minimizes ``sum(w * (y - Xb)**2)``.
    absorbed_dof : int
        Degrees of freedom already used by fixed effects partialled out of
        ``X`` and ``y``.
    """
    X, names = _as_design(X, names)
    y = np.asarray(y, dtype=float).ravel()
    w = None if weights is None else np.asarray(weights, dtype=float).ravel()
    _check_finite(X, y, w)
    if w is not None and np.any(w <= 0):
        raise RailpanelError("BAD_WEIGHTS", "weights must be strictly positive")
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y have different numbers of rows")

    sw = np.ones_like(y) if w is None else np.sqrt(w)
    Xw = X * sw[:, None] if w is not None else X
    yw = y * sw if w is not None else y
    keep = independent_columns(Xw, tol)
    if not keep:
        raise RailpanelError("ALL_COLLINEAR", "no linearly independent regressor")
    dropped = [names[j] for j in range(X.shape[1]) if j not in keep]
    if dropped:
        log.debug("dropped collinear columns: %s", dropped)
    Xr = X[:, keep]
    Q, R = np.linalg.qr(Xw[:, keep])
    beta = linalg.solve_triangular(R, Q.T @ yw)
    fitted = Xr @ beta
    resid = y - fitted
    Rinv = linalg.solve_triangular(R, np.eye(R.shape[0]))
    bread = Rinv @ Rinv.T
    wt = np.ones_like(y) if w is None else w
    scores = Xr * (wt * resid)[:, None]
    dof = X.shape[0] - len(keep) - int(absorbed_dof)
    return FitResult(
        names=[names[j] for j in keep], params=beta, dropped_columns=dropped,
        residuals=resid, dof_residual=dof, scores=scores, bread=bread,
        design=Xr, fitted=fitted, absorbed_dof=int(absorbed_dof),
        extra={"weights": w},
    )


# -- fixed effects ----------------------------------------------------------

def _codes(factor):
    codes, uniq = pd.factorize(np.asarray(factor), sort=True)
    if np.any(codes < 0):
        raise RailpanelError("MISSING_FACTOR", "fixed-effect factor has missing levels")
    return codes.astype(np.int64), len(uniq)


def demean(data, fe, tol=1e-8, max_iter=1000, return_info=False):
    """Partial out one or more categorical fixed effects.

    Alternating projections: sweep over the factors subtracting group means
    until every group mean of every column is below ``tol`` in absolute
    value.

    Parameters
    ----------
    data : array (n,) or (n, p)
    fe : list of array-like (n,)
        Factor labels; any hashable values.

    Returns
    -------
    ndarray of the same shape as ``data``; with ``return_info`` also the
    number of sweeps and the final max absolute group mean.
    """
    x = np.array(data, dtype=float, copy=True)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    _check_finite(x)
    facs = [_codes(f) for f in fe]
    for codes, _ in facs:
        if codes.shape[0] != x.shape[0]:
            raise ValueError("factor length does not match data")
    counts = [np.bincount(c, minlength=k).astype(float) for c, k in facs]

    def group_means(j):
        codes, k = facs[j]
        out = np.empty((k, x.shape[1]))
        for col in range(x.shape[1]):
            out[:, col] = np.bincount(codes, weights=x[:, col], minlength=k)
        return out / counts[j][:, None]

    sweeps, worst = 0, 0.0
    if facs:
        while True:
            for j, (codes, _) in enumerate(facs):
                x -= group_means(j)[codes]
            sweeps += 1
            # the last factor is exactly centred after its own step
            worst = max((np.abs(group_means(j)).max() for j in range(len(facs) - 1)), default=0.0)
            if worst < tol:
                break
            if sweeps >= max_iter:
                raise RailpanelError("NO_CONVERGENCE",
                                     f"demeaning did not converge in {max_iter} sweeps "
                                     f"(max residual group mean {worst:.3e})",
                                     max_residual_mean=float(worst))
    out = x[:, 0] if squeeze else x
    return (out, sweeps, worst) if return_info else out


def is_nested(inner, outer) -> bool:
    """True when every level of ``inner`` sits inside a single level of ``outer``."""
    ci, _ = _codes(inner)
    co, _ = _codes(outer)
    pairs = pd.DataFrame({"i": ci, "o": co}).drop_duplicates()
    return not pairs["i"].duplicated().any()


def absorbed_dof(fe) -> int:
    """Degrees of freedom consumed by a set of fixed-effect factors.

    Factors that contain another listed factor (e.g. period when
    county x period is present) are redundant and skipped. The first two
    remaining factors are counted exactly with the connected-components
    correction; each further factor is charged ``levels - 1``.
    """
    facs = [_codes(f) for f in fe]
    keep = []
    for j, (cj, kj) in enumerate(facs):
        redundant = False
        for i, (ci, ki) in enumerate(facs):
            if i == j:
                continue
            if is_nested(ci, cj) and (not is_nested(cj, ci) or i < j):
                redundant = True
                break
        if not redundant:
            keep.append(j)
    facs = [facs[j] for j in keep]
    if not facs:
        return 0
    total = facs[0][1]
    if len(facs) >= 2:
        (c1, k1), (c2, k2) = facs[0], facs[1]
        graph = coo_matrix((np.ones_like(c1), (c1, c2 + k1)), shape=(k1 + k2, k1 + k2))
        n_comp, _ = connected_components(graph, directed=False)
        total = k1 + k2 - n_comp
    for _, k in facs[2:]:
        total += k - 1
    return int(total)


# -- Poisson ----------------------------------------------------------------

def _poisson_deviance(y, mu):
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return 2.0 * np.sum(term - (y - mu))


def poisson_loglik(params, X, y):
    eta = X @ params
    return float(np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0)))


def poisson_fit(X, y, names=None, tol=1e-10, max_iter=50) -> FitResult:
    """Poisson regression with log link fitted by IRLS.

    Iterates until the relative change in deviance falls below ``tol``.
    Raises ``SEPARATION`` when the MLE does not exist (all-zero outcome or
    diverging coefficients).
    """
    X, names = _as_design(X, names)
    y = np.asarray(y, dtype=float).ravel()
    _check_finite(X, y)
    if np.any(y < 0):
        raise RailpanelError("NEGATIVE_OUTCOME", "Poisson outcome must be non-negative")
    if not np.any(y > 0):
        raise RailpanelError("SEPARATION", "outcome is zero everywhere; MLE does not exist")
    keep = independent_columns(X)
    if not keep:
        raise RailpanelError("ALL_COLLINEAR", "no linearly independent regressor")
    dropped = [names[j] for j in range(X.shape[1]) if j not in keep]
    Xr = X[:, keep]
    kept_names = [names[j] for j in keep]

    beta = np.zeros(Xr.shape[1])
    const = [j for j in range(Xr.shape[1]) if np.ptp(Xr[:, j]) == 0 and Xr[0, j] != 0]
    if const:
        beta[const[0]] = np.log(y.mean() + 0.1) / Xr[0, const[0]]

    eta = Xr @ beta
    mu = np.exp(eta)
    dev = _poisson_deviance(y, mu)
    converged = False
    for it in range(1, max_iter + 1):
        z = eta + (y - mu) / mu
        Xw = Xr * np.sqrt(mu)[:, None]
        beta = np.linalg.lstsq(Xw, z * np.sqrt(mu), rcond=None)[0]
        if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > 1e6:
            raise RailpanelError("SEPARATION", "coefficients diverge; check for separation")
        eta = Xr @ beta
        if eta.max() > 700:
            raise RailpanelError("SEPARATION", "linear predictor overflows; check for separation")
        mu = np.exp(eta)
        dev_new = _poisson_deviance(y, mu)
        if abs(dev_new - dev) / (abs(dev_new) + 0.1) < tol:
            dev = dev_new
            converged = True
            break
        dev = dev_new
    if not converged:
        raise RailpanelError("NO_CONVERGENCE", f"IRLS did not converge in {max_iter} iterations")
    # final Newton polish keeps the score at round-off level
    score = Xr.T @ (y - mu)
    hess = (Xr * mu[:, None]).T @ Xr
    beta = beta + np.linalg.solve(hess, score)
    eta = Xr @ beta
    mu = np.exp(eta)
    hess = (Xr * mu[:, None]).T @ Xr
    bread = np.linalg.inv(hess)
    resid = y - mu
    if np.any(np.abs(beta) > 1e6):
        raise RailpanelError("SEPARATION", "coefficients diverge; check for separation")
    return FitResult(
        names=kept_names, params=beta, dropped_columns=dropped, residuals=resid,
        dof_residual=X.shape[0] - len(keep), scores=Xr * resid[:, None], bread=bread,
        design=Xr, fitted=mu, log_likelihood=poisson_loglik(beta, Xr, y), n_iter=it,
        extra={"deviance": _poisson_deviance(y, mu)},
    )
