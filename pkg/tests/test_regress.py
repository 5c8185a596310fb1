import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from railpanel.errors import RailpanelError
from railpanel.regress import absorbed_dof, demean, independent_columns, ols, poisson_fit
from oracles import dummies, dummy_ols, grid_mle


def random_unbalanced(rng, n_units=12, n_periods=4, drop=0.2):
    u = np.repeat(np.arange(n_units), n_periods)
    t = np.tile(np.arange(n_periods), n_units)
    keep = rng.random(u.size) > drop
    return u[keep], t[keep]


def test_ols_matches_lstsq(rng):
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 3))])
    y = rng.normal(size=50)
    fit = ols(X, y)
    ref, *_ = np.linalg.lstsq(X, y, rcond=None)
    np.testing.assert_allclose(fit.params, ref, atol=1e-12)
    assert fit.dof_residual == 46
    np.testing.assert_allclose(fit.bread, np.linalg.inv(X.T @ X), atol=1e-12)


def test_collinear_columns_dropped_left_to_right(rng):
    x = rng.normal(size=30)
    X = np.column_stack([np.ones(30), x, 2 * x + 1, rng.normal(size=30)])
    fit = ols(X, rng.normal(size=30), names=["c", "x", "x2", "z"])
    assert fit.names == ["c", "x", "z"]
    assert fit.dropped_columns == ["x2"]
    assert independent_columns(np.zeros((5, 2))) == []
    with pytest.raises(RailpanelError) as exc:
        ols(np.zeros((5, 1)), np.ones(5))
    assert exc.value.code == "ALL_COLLINEAR"


def test_unit_weights_equal_unweighted(rng):
    X = np.column_stack([np.ones(40), rng.normal(size=40)])
    y = rng.normal(size=40)
    np.testing.assert_allclose(ols(X, y, weights=np.ones(40)).params, ols(X, y).params, atol=1e-14)


def test_weighted_matches_normal_equations(rng):
    X = np.column_stack([np.ones(40), rng.normal(size=40)])
    y = rng.normal(size=40)
    w = rng.uniform(0.5, 2.0, 40)
    ref = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
    np.testing.assert_allclose(ols(X, y, weights=w).params, ref, atol=1e-12)
    with pytest.raises(RailpanelError):
        ols(X, y, weights=-w)


def test_nonfinite_rejected():
    with pytest.raises(RailpanelError) as exc:
        ols(np.ones((3, 1)), np.array([1.0, np.nan, 2.0]))
    assert exc.value.code == "NONFINITE_INPUT"


def test_balanced_two_way_demeaning_closed_form(rng):
    Y = rng.normal(size=(6, 5))
    u = np.repeat(np.arange(6), 5)
    t = np.tile(np.arange(5), 6)
    closed = Y - Y.mean(1, keepdims=True) - Y.mean(0, keepdims=True) + Y.mean()
    got = demean(Y.ravel(), [u, t], tol=1e-14)
    np.testing.assert_allclose(got, closed.ravel(), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_demeaning_idempotent_and_centred(seed):
    rng = np.random.default_rng(seed)
    u, t = random_unbalanced(rng)
    x = rng.normal(size=u.size)
    once = demean(x, [u, t], tol=1e-13, max_iter=100_000)
    twice = demean(once, [u, t], tol=1e-13, max_iter=100_000)
    np.testing.assert_allclose(once, twice, atol=1e-11)
    for f in (u, t):
        n = np.bincount(f)
        means = np.bincount(f, weights=once)[n > 0] / n[n > 0]
        assert np.abs(means).max() < 1e-11


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_frisch_waugh_against_dummies(seed):
    rng = np.random.default_rng(seed)
    u, t = random_unbalanced(rng)
    X = rng.normal(size=(u.size, 2))
    y = X @ [0.5, -1.0] + rng.normal(size=u.size) + u * 0.1 + t * 0.3
    data = demean(np.column_stack([y, X]), [u, t], tol=1e-14, max_iter=100_000)
    fit = ols(data[:, 1:], data[:, 0])
    np.testing.assert_allclose(fit.params, dummy_ols(y, X, [u, t]), atol=1e-8)


def dummy_rank(factors):
    return np.linalg.matrix_rank(np.column_stack([dummies(np.asarray(f), drop_first=False)
                                                  for f in factors]))


def test_absorbed_dof_counts():
    u = np.repeat(np.arange(4), 3)
    t = np.tile(np.arange(3), 4)
    assert absorbed_dof([u, t]) == 4 + 3 - 1 == dummy_rank([u, t])
    cty = np.repeat([0, 0, 1, 1], 3)
    # period is redundant given county x period; unit and county x period
    # form one connected component per county
    assert absorbed_dof([u, t, cty * 3 + t]) == 4 + 6 - 2 == dummy_rank([u, t, cty * 3 + t])
    u2 = np.array([0, 0, 1, 1])
    t2 = np.array([0, 1, 2, 3])
    assert absorbed_dof([u2, t2]) == 2 + 4 - 2 == dummy_rank([u2, t2])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_absorbed_dof_two_factors_equals_rank(seed):
    rng = np.random.default_rng(seed)
    u, t = random_unbalanced(rng, 8, 4, 0.4)
    assert absorbed_dof([u, t]) == dummy_rank([u, t])


def test_poisson_against_grid_mle(rng):
    X = np.column_stack([np.ones(150), rng.normal(size=150), rng.uniform(-1, 1, 150)])
    y = rng.poisson(np.exp(X @ [0.4, 0.3, -0.5])).astype(float)
    fit = poisson_fit(X, y)
    np.testing.assert_allclose(fit.params, grid_mle(X, y), atol=1e-4)
    assert np.abs(X.T @ (y - fit.fitted)).max() < 1e-6


def test_poisson_score_finite_difference(rng):
    X = np.column_stack([np.ones(80), rng.normal(size=80)])
    y = rng.poisson(2.0, 80).astype(float)
    fit = poisson_fit(X, y)
    from railpanel.regress import poisson_loglik
    h = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (poisson_loglik(fit.params + e, X, y) - poisson_loglik(fit.params - e, X, y)) / (2 * h)
        assert abs(fd) < 1e-5


def test_poisson_separation():
    X = np.column_stack([np.ones(6), [0, 0, 0, 1, 1, 1]])
    with pytest.raises(RailpanelError) as exc:
        poisson_fit(X, np.zeros(6))
    assert exc.value.code == "SEPARATION"


def test_poisson_intercept_only_is_log_mean():
    y = np.array([0, 1, 3, 2, 4, 0, 1.0])
    fit = poisson_fit(np.ones((7, 1)), y)
    assert fit.params[0] == pytest.approx(np.log(y.mean()), abs=1e-12)


def test_poisson_two_column_grid_1e6(rng):
    X = np.column_stack([np.ones(60), rng.normal(size=60)])
    y = rng.poisson(np.exp(0.2 + 0.5 * X[:, 1])).astype(float)
    np.testing.assert_allclose(poisson_fit(X, y).params, grid_mle(X, y, stop=1e-9), atol=1e-6)
