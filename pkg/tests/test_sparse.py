import json

import numpy as np
import pytest

from dyndml.data import split
from dyndml.errors import ValidationError
from dyndml.gestimate import calibrated_outcomes, peel
from dyndml.regression import LearnerSpec
from dyndml.residualize import residualize_markov
from dyndml.simulate import generate, sparse_instance, true_effects
from dyndml.sparse import SparseOptions, fit_sparse, stage_kappa_max, stage_kkt_violation

from conftest import random_residuals


def sparse_residuals(n, seed):
    cfg = sparse_instance(n=n, r=60)
    panel = generate(cfg, seed=seed)
    return residualize_markov(panel, LearnerSpec(kind="ols"), split(panel, seed)), true_effects(cfg)


def test_zero_penalty_equals_peel():
    res = random_residuals(n=400, r=3)
    est = fit_sparse(res, SparseOptions(schedule="fixed", kappas=(0.0,)))
    np.testing.assert_allclose(est.psi, peel(res), atol=1e-6)


def test_penalty_above_stage_max_zeroes_stage():
    res = random_residuals(n=400, r=3)
    kmax = stage_kappa_max(res, np.zeros((3, 3)), 3)
    est = fit_sparse(res, SparseOptions(schedule="fixed", kappas=(kmax * 1.001, 0.0, 0.0)[::-1]))
    assert np.all(est.psi[2] == 0)
    assert np.any(est.psi[1] != 0)


def test_stage_kkt_conditions():
    res, _ = sparse_residuals(500, 0)
    est = fit_sparse(res, SparseOptions(schedule="cv"))
    for t in range(res.m, 0, -1):
        T = res.t_resid[(t, t)]
        ybar = calibrated_outcomes(res, est.psi, t)
        G, c = T.T @ T / res.n, T.T @ ybar / res.n
        assert stage_kkt_violation(G, c, est.psi[t - 1], est.kappas[t - 1]) <= 1e-6


def test_monotone_in_penalty():
    res, _ = sparse_residuals(500, 1)
    norms = []
    for kappa in np.linspace(0.0, 0.6, 13):
        est = fit_sparse(res, SparseOptions(schedule="fixed", kappas=(kappa,)))
        norms.append(np.abs(est.psi[-1]).sum())
    assert np.all(np.diff(norms) <= 1e-10)


def test_ball_rescaling_flagged():
    res, _ = sparse_residuals(500, 2)
    est = fit_sparse(res, SparseOptions(schedule="fixed", kappas=(0.01,), radius=0.5))
    assert all(est.rescaled)
    assert np.all(np.abs(est.psi).sum(axis=1) <= 0.5 + 1e-12)


def test_restricted_cone_with_theory_schedule():
    hits = 0
    for rep in range(20):
        res, truth = sparse_residuals(500, 100 + rep)
        est = fit_sparse(res, SparseOptions(schedule="theory"))
        ok = True
        for t in range(res.m):
            nu = est.psi[t] - truth[t]
            S = truth[t] != 0
            ok &= np.abs(nu[~S]).sum() <= 3 * np.abs(nu[S]).sum()
        hits += ok
    assert hits >= 18


def test_options_validation_and_serialization():
    with pytest.raises(ValidationError):
        SparseOptions(schedule="bic")
    with pytest.raises(ValidationError):
        SparseOptions(schedule="fixed")
    with pytest.raises(ValidationError):
        SparseOptions(radius=0.0)
    res, _ = sparse_residuals(300, 3)
    d = fit_sparse(res).to_dict()
    json.dumps(d)
    assert set(d["stages"]["1"]) >= {"kappa", "support", "values"}
