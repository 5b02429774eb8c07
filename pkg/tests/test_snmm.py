import numpy as np
import pytest

from dyndml.data import split
from dyndml.errors import ValidationError
from dyndml.gestimate import peel
from dyndml.regression import LearnerSpec
from dyndml.residualize import HistoryFeaturizer, residualize_markov, residualize_snmm
from dyndml.simulate import generate, paper_instance, true_blip_coefficients, true_policy_value
from dyndml.snmm import (DynamicPolicy, build_Q, check_baseline_zero, exo_interaction_blip, feature_blip,
                         gestimate_snmm, linear_blip, make_blip, make_policy, off_policy_value,
                         random_exo_policies)


def test_linear_zero_policy_equals_markov_bitwise(panel):
    sp = split(panel, 11)
    learner = LearnerSpec(kind="lasso")
    a = residualize_markov(panel, learner, sp, HistoryFeaturizer("markov"))
    b = residualize_snmm(panel, linear_blip(panel.d), DynamicPolicy("zero"), learner, sp,
                         HistoryFeaturizer("markov"))
    for key in a.t_resid:
        assert np.array_equal(a.t_resid[key], b.t_resid[key])
    for t in a.y_resid:
        assert np.array_equal(a.y_resid[t], b.y_resid[t])
    assert np.array_equal(peel(a), peel(b))


def test_factorized_matches_generic_path():
    cfg = paper_instance(n=4000, n_x=4, n_t=2, hetero=True)
    panel = generate(cfg, seed=0)
    sp = split(panel, 2)
    learner = LearnerSpec(kind="ols")
    feat = HistoryFeaturizer("markov_exo")
    blip = exo_interaction_blip(2, 1)
    pol = DynamicPolicy("zero")
    a = residualize_snmm(panel, blip, pol, learner, sp, feat, factorize=True)
    b = residualize_snmm(panel, blip, pol, learner, sp, feat, factorize=False)
    assert a.provenance["factorized"] and not b.provenance.get("factorized", False)
    # the constant-factor columns are the same regressions; interaction columns agree only in population
    for key in a.t_resid:
        np.testing.assert_allclose(a.t_resid[key][:, [0, 2]], b.t_resid[key][:, [0, 2]], atol=1e-10)
    np.testing.assert_allclose(peel(a), peel(b), atol=0.15)


def test_baseline_check_rejects_offset(panel):
    bad = feature_blip(lambda pan, t, tau: tau + 1.0, 1, "offset")
    with pytest.raises(ValidationError, match="baseline"):
        check_baseline_zero(bad, panel)
    assert check_baseline_zero(linear_blip(1), panel)


def test_blip_shape_errors(panel):
    bad = feature_blip(lambda pan, t, tau: np.ones((pan.n, 3)) * tau, 2, "wrong")
    with pytest.raises(ValidationError, match="shape"):
        bad.evaluate(panel, 1, panel.T(1))


def test_exo_interaction_layout():
    cfg = paper_instance(n=50, n_x=4, n_t=2, hetero=True)
    pan = generate(cfg, seed=0)
    blip = exo_interaction_blip(2, 1)
    phi = blip.evaluate(pan, 1, pan.T(1))
    np.testing.assert_array_equal(phi[:, 0], pan.T(1)[:, 0])
    np.testing.assert_array_equal(phi[:, 1], pan.T(1)[:, 0] * pan.exo_features[:, 0])
    np.testing.assert_array_equal(phi[:, 3], pan.T(1)[:, 1] * pan.exo_features[:, 0])


def test_replay_value_is_mean_outcome(panel):
    est = gestimate_snmm(panel, linear_blip(1), DynamicPolicy("zero"), LearnerSpec(kind="ols"), split(panel, 0))
    opv = off_policy_value(panel, est, build_Q(panel, linear_blip(1), DynamicPolicy("replay")))
    assert opv.value == np.mean(panel.final_outcome)


def test_zero_policy_value_sign(panel):
    est = gestimate_snmm(panel, linear_blip(1), DynamicPolicy("zero"), LearnerSpec(kind="ols"), split(panel, 0))
    opv = off_policy_value(panel, est, build_Q(panel, linear_blip(1), DynamicPolicy("zero")))
    expected = np.mean(panel.final_outcome - panel.treatments[:, :, 0] @ est.psi[:, 0])
    assert opv.value == pytest.approx(expected, abs=1e-12)


def test_policies_and_registry():
    assert make_policy("zero").kind == "zero"
    pol = make_policy({"kind": "static", "tau": [[1.0], [0.0], [1.0]], "name": "pulse"})
    assert pol.name == "pulse" and pol.exo_only
    assert not DynamicPolicy("replay").exo_only
    with pytest.raises(ValidationError):
        DynamicPolicy("greedy")
    with pytest.raises(ValidationError):
        make_blip("quadratic", 1)
    pols = random_exo_policies(10, 2, seed=0)
    assert len({p.name for p in pols}) == 10


def test_true_threshold_value_by_simulation():
    cfg = paper_instance(n=200000, n_x=4, n_t=1, hetero=True, C=0.0)
    pol = random_exo_policies(1, 1, seed=5)[0]
    sim = generate(cfg, policy=pol, seed=3)
    base = generate(cfg, policy=DynamicPolicy("zero"), seed=3)
    diff = sim.final_outcome - base.final_outcome
    se = diff.std() / np.sqrt(cfg.n)
    assert abs(diff.mean() - true_policy_value(cfg, pol)) < 4 * se


def test_hetero_blip_truth_layout():
    cfg = paper_instance(n=10, n_x=4, n_t=2, hetero=True, beta0=0.7)
    truth = true_blip_coefficients(cfg)
    assert truth.shape == (3, 4)
    np.testing.assert_allclose(truth[2], [1.0, 0.7, 1.0, 0.7])
    np.testing.assert_allclose(truth[:2, 1], 0.0)


def test_snmm_estimate_serializes(panel):
    est = gestimate_snmm(panel, make_blip("linear", 1), make_policy("zero"), LearnerSpec(kind="ols"),
                         split(panel, 0))
    d = est.to_dict()
    assert d["method"] == "snmm" and set(d["psi"]) == {"1", "2", "3"}
