import numpy as np
import pytest

from dyndml.data import PanelDataset, split
from dyndml.errors import ValidationError
from dyndml.regression import LearnerSpec
from dyndml.residualize import HistoryFeaturizer, ResidualSet, residualize_markov, stage_seed


def test_residual_keys_and_shapes(residuals, panel):
    assert set(residuals.t_resid) == {(t, j) for t in range(1, 4) for j in range(t, 4)}
    assert residuals.t_resid[(1, 3)].shape == (panel.n, panel.d)
    assert residuals.check_out_of_fold()


def test_zero_learner_returns_raw_targets(panel):
    res = residualize_markov(panel, LearnerSpec(kind="zero"), split(panel, 0))
    np.testing.assert_array_equal(res.y_resid[2], panel.final_outcome)
    np.testing.assert_array_equal(res.t_resid[(1, 3)], panel.T(3))


def test_predictions_are_out_of_fold(panel):
    sp = split(panel, 5)
    res = residualize_markov(panel, LearnerSpec(kind="ols"), sp)
    # refitting on fold 0's training units must reproduce fold 1's residuals
    from dyndml.regression import fit_ols

    test = sp.test_index(1)
    X = panel.X(2)
    mdl = fit_ols(X[sp.train_index(1)], panel.final_outcome[sp.train_index(1)])
    np.testing.assert_allclose(res.y_resid[2][test], panel.final_outcome[test] - mdl.predict(X[test]), atol=1e-12)


def test_leaky_provenance_detected(residuals):
    fits = [dict(residuals.provenance["fits"][0])]
    fits[0]["train_index"] = np.arange(10)
    fits[0]["predict_index"] = np.arange(5, 15)
    leaky = ResidualSet(residuals.m, residuals.r, residuals.n, residuals.y_resid, residuals.t_resid,
                        residuals.folds, {"fits": fits})
    assert not leaky.check_out_of_fold()


def test_featurizer_modes(panel):
    assert HistoryFeaturizer("markov")(panel, 2).shape == (panel.n, panel.p)
    assert HistoryFeaturizer("markov_lag")(panel, 2).shape == (panel.n, panel.p + panel.d)
    assert HistoryFeaturizer("full_history")(panel, 3).shape == (panel.n, 3 * panel.p + 2 * panel.d)
    with pytest.raises(ValidationError):
        HistoryFeaturizer("everything")


def test_constant_target_warns(panel):
    T = panel.treatments.copy()
    T[:, 2] = 1.0
    pan = PanelDataset(states=panel.states, treatments=T, final_outcome=panel.final_outcome)
    with pytest.warns(UserWarning, match="constant"):
        res = residualize_markov(pan, LearnerSpec(kind="ols"), split(pan, 0))
    assert res.warnings


def test_split_size_mismatch(panel):
    with pytest.raises(ValidationError):
        residualize_markov(panel, LearnerSpec(kind="ols"), split(panel.n + 1, 0))


def test_save_load_round_trip(residuals, tmp_path):
    path = tmp_path / "res.npz"
    residuals.save(path)
    back = ResidualSet.load(path)
    for key in residuals.t_resid:
        np.testing.assert_array_equal(back.t_resid[key], residuals.t_resid[key])
    np.testing.assert_array_equal(back.y_resid[1], residuals.y_resid[1])


def test_missing_pair_rejected(residuals):
    tr = dict(residuals.t_resid)
    del tr[(1, 2)]
    with pytest.raises(ValidationError, match=r"t=1, j=2"):
        ResidualSet(residuals.m, residuals.r, residuals.n, residuals.y_resid, tr, residuals.folds)


def test_stage_seeds_distinct():
    seeds = {stage_seed(0, t, k) for t in range(1, 5) for k in range(3)}
    assert len(seeds) == 12
