import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyndml import _kernels
from dyndml.errors import ConvergenceError, ValidationError
from dyndml.regression import (LearnerSpec, fit, fit_lasso, fit_ols, fit_ridge, fit_targets, kkt_violation,
                               lambda_grid, lambda_max, lasso_objective, select_lambda)


def lasso_problem(N=80, q=10, seed=0, s=3):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, q))
    beta = np.zeros(q)
    beta[:s] = rng.uniform(0.5, 2, s)
    return X, X @ beta + rng.standard_normal(N) + 3.0


def test_ols_matches_lstsq():
    X, y = lasso_problem()
    mdl = fit_ols(X, y)
    Z = np.hstack([np.ones((len(y), 1)), X])
    ref = np.linalg.lstsq(Z, y, rcond=None)[0]
    np.testing.assert_allclose(mdl.coef, ref[1:], atol=1e-10)
    assert mdl.intercept == pytest.approx(ref[0], abs=1e-10)


def test_ols_rank_deficient_flagged():
    X, y = lasso_problem()
    X = np.hstack([X, X[:, :1]])
    assert fit_ols(X, y).rank_deficient


def test_ridge_closed_form():
    X, y = lasso_problem()
    mdl = fit_ridge(X, y, 0.3)
    Xc, yc = X - X.mean(0), y - y.mean()
    ref = np.linalg.solve(Xc.T @ Xc / len(y) + 0.3 * np.eye(X.shape[1]), Xc.T @ yc / len(y))
    np.testing.assert_allclose(mdl.coef, ref, atol=1e-10)


def test_lambda_max_gives_zero_and_just_below_does_not():
    X, y = lasso_problem()
    lm = lambda_max(X, y)
    assert np.all(fit_lasso(X, y, lm * 1.0001).coef == 0)
    assert np.any(fit_lasso(X, y, lm * 0.99).coef != 0)


def test_lambda_zero_matches_ols():
    X, y = lasso_problem()
    las = fit_lasso(X, y, 0.0, tol=1e-12, max_iter=100000)
    np.testing.assert_allclose(las.coef, fit_ols(X, y).coef, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), q=st.integers(1, 50), ratio=st.floats(0.01, 0.9))
def test_lasso_kkt(seed, q, ratio):
    X, y = lasso_problem(N=60, q=q, seed=seed, s=min(q, 3))
    lam = ratio * lambda_max(X, y)
    mdl = fit_lasso(X, y, lam, tol=1e-10, max_iter=100000)
    assert kkt_violation(X, y, mdl) <= 1e-6


def test_unpenalized_weight_keeps_coefficient():
    X, y = lasso_problem()
    w = np.ones(X.shape[1])
    w[5] = 0.0
    mdl = fit_lasso(X, y, 10 * lambda_max(X, y), weights=w)
    assert mdl.coef[5] != 0 and np.all(np.delete(mdl.coef, 5) == 0)


def test_lasso_beats_perturbations():
    X, y = lasso_problem()
    mdl = fit_lasso(X, y, 0.1, tol=1e-10)
    base = lasso_objective(X, y, mdl)
    rng = np.random.default_rng(1)
    for _ in range(20):
        other = type(mdl)(mdl.coef + 1e-3 * rng.standard_normal(mdl.coef.shape), mdl.intercept, mdl.lam, "lasso")
        assert lasso_objective(X, y, other) >= base - 1e-12


def test_nonconvergence_raises():
    X, y = lasso_problem(q=30)
    X[:, 1] = X[:, 0] + 1e-3 * X[:, 1]
    with pytest.raises(ConvergenceError) as info:
        fit_lasso(X, y, 1e-4, tol=1e-14, max_iter=2)
    assert info.value.last_change > 0


def test_negative_lambda_rejected():
    X, y = lasso_problem()
    with pytest.raises(ValidationError):
        fit_lasso(X, y, -1.0)


def test_backends_agree():
    impls = _kernels.backends()
    if len(impls) < 2:
        pytest.skip("compiled backend not built")
    X, y = lasso_problem(q=40)
    Xc, yc = X - X.mean(0), y - y.mean()
    G, c = Xc.T @ Xc / len(y), Xc.T @ yc / len(y)
    grid = lambda_grid(float(np.abs(c).max()), 20, 1e-3)
    w = np.ones(G.shape[0])
    out = {name: path(G, c, grid, w, None, 1e-10, 100000) for name, (_, path) in impls.items()}
    np.testing.assert_allclose(out["python"][0], out["cython"][0], atol=1e-12)
    np.testing.assert_array_equal(out["python"][1], out["cython"][1])


def test_cv_selection_in_grid_and_deterministic():
    X, y = lasso_problem(N=200, q=30)
    spec = LearnerSpec(kind="lasso")
    lam = select_lambda(X, y, spec, seed=4)
    assert lam == select_lambda(X, y, spec, seed=4)
    assert 0 < lam <= lambda_max(X, y)


def test_plugin_penalty():
    X, y = lasso_problem(N=200, q=30)
    lam = select_lambda(X, y, LearnerSpec(kind="lasso", selection="plugin", plugin_c=2.0))
    assert lam == pytest.approx(2.0 * np.std(y) * np.sqrt(np.log(30) / 200))


def test_auto_resolves_by_size():
    assert LearnerSpec().resolve(100, 10).kind == "ols"
    assert LearnerSpec().resolve(100, 50).kind == "lasso"


def test_fit_targets_matches_separate_fits():
    X, y = lasso_problem(N=150, q=40)
    Y = np.column_stack([y, -2 * y + X[:, 3]])
    spec = LearnerSpec(kind="lasso", tol=1e-10)
    joint = fit_targets(X, Y, spec, seed=2)
    for k in range(2):
        single = fit(X, Y[:, k], spec, seed=2)
        np.testing.assert_allclose(joint[k].coef, single.coef, atol=1e-8)
        assert joint[k].lam == pytest.approx(single.lam)


def test_spec_round_trip():
    spec = LearnerSpec(kind="lasso", grid=(1.0, 0.1))
    assert LearnerSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValidationError):
        LearnerSpec.from_dict({"kind": "forest"})
    with pytest.raises(ValidationError):
        LearnerSpec.from_dict({"depth": 3})
