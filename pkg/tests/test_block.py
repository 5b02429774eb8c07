import numpy as np
import pytest

from dyndml.block import check_progressive, discounted_value, evaluation_blocks, fit_block
from dyndml.data import SingleSeries
from dyndml.errors import ShapeError, ValidationError
from dyndml.gestimate import peel
from dyndml.regression import LearnerSpec
from dyndml.residualize import ResidualSet
from dyndml.simulate import DGPConfig, generate_series, true_effects


def stable_config(**kw):
    base = dict(n=2, m=3, d=1, p=2, A=0.5, B=0.5 * np.eye(2), C=0.2, D=0.2, mu=[0.8, 0.8], theta0=[1.0],
                sigma_eps=0.1, sigma_zeta=1.0, sigma_eta=0.1)
    base.update(kw)
    return DGPConfig(**base)


def test_discounted_value_examples():
    assert discounted_value(np.array([1.0, 0.5]), 0.9, [1, 1]) == pytest.approx(2.35)
    assert discounted_value(np.array([1.0, 0.5]), 0.9, [0, 0]) == 0.0
    assert discounted_value(np.array([1.3, 0.5, 0.2]), 1e-12, [1.0]) == pytest.approx(1.3)
    with pytest.raises(ValidationError):
        discounted_value(np.array([1.0]), 1.0, [1])
    with pytest.raises(ValidationError):
        discounted_value(np.array([1.0]), 0.5, [1, 1])


def test_evaluation_blocks_second_half():
    np.testing.assert_array_equal(evaluation_blocks(8), [3, 4, 5, 6, 7])


def test_recovers_truth_and_is_progressive():
    cfg = stable_config()
    est = fit_block(generate_series(cfg, 200, seed=0))
    np.testing.assert_allclose(est.psi, true_effects(cfg), atol=0.1)
    assert check_progressive(est)
    np.testing.assert_array_equal(est.theta[0], est.psi[-1])
    np.testing.assert_array_equal(est.theta[2], est.psi[0])
    assert est.estimate.method == "block"
    off = est.estimate.Sigma[0, 1:]
    assert np.all(off == 0)


def test_leak_detected():
    cfg = stable_config()
    est = fit_block(generate_series(cfg, 20, seed=0))
    fits = est.residuals.provenance["fits"]
    fits[0]["train_index"] = np.arange(fits[0]["predict_index"][0] + 1)
    assert not check_progressive(est)


def test_zero_learner_matches_oracle_peel():
    rng = np.random.default_rng(0)
    L = 3 * 40
    ser = SingleSeries(rng.standard_normal((L, 2)), rng.standard_normal(L), rng.standard_normal(L), 3)
    est = fit_block(ser, LearnerSpec(kind="zero"))
    pan = ser.as_blocks()
    ev = evaluation_blocks(pan.n)
    y = {t: pan.final_outcome[ev] for t in range(1, 4)}
    tr = {(t, j): pan.T(j)[ev] for t in range(1, 4) for j in range(t, 4)}
    oracle = peel(ResidualSet(3, 1, len(ev), y, tr, ev))
    np.testing.assert_allclose(est.psi, oracle, atol=1e-8)


def test_short_series_rejected():
    with pytest.raises(ShapeError):
        SingleSeries(np.zeros((6, 1)), np.zeros(6), np.zeros(6), 2)
