import json

import numpy as np
import pytest

from dyndml.errors import UnsupportedConfigError, ValidationError
from dyndml.simulate import (BENCHMARK_METHODS, DGPConfig, GaussianLinearModel, benchmark_instance, benchmarks,
                             generate, monte_carlo, paper_instance, true_effects, true_kappa)

from conftest import small_config


def test_zero_noise_zero_policy_gives_zeros():
    cfg = small_config(C=0.0, D=0.0, sigma_eps=0, sigma_zeta=0, sigma_eta=0)
    pan = generate(cfg)
    assert not pan.states.any() and not pan.treatments.any() and not pan.final_outcome.any()


def test_paper_matrices():
    cfg = paper_instance()
    assert np.all(cfg.A == 0.5)
    np.testing.assert_array_equal(cfg.B, 0.5 * np.eye(450))
    np.testing.assert_array_equal(cfg.C, 0.2 * np.eye(2))
    assert np.all(cfg.D[:, :2] == 0.4) and np.all(cfg.D[:, 2:] == 0)
    assert np.all(cfg.mu[:2] == 0.8) and np.all(cfg.mu[2:] == 0)


def test_deterministic():
    cfg = small_config()
    a, b = generate(cfg, seed=4), generate(cfg, seed=4)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.final_outcome, b.final_outcome)


def test_true_effects_examples():
    cfg = small_config()
    np.testing.assert_allclose(true_effects(cfg)[:, 0], [0.4, 0.8, 1.0])
    np.testing.assert_allclose(true_effects(small_config(A=0.0))[:, 0], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(true_effects(small_config(m=1)), [[1.0]])


def test_markov_factorization_recovers_transition():
    cfg = small_config(n=20000)
    pan = generate(cfg, seed=0)
    Z = np.hstack([pan.T(1), pan.X(1)])
    coef = np.linalg.lstsq(Z, pan.X(2), rcond=None)[0].T
    np.testing.assert_allclose(coef[:, :1], cfg.A, atol=0.03)
    np.testing.assert_allclose(coef[:, 1:], cfg.B, atol=0.03)


def test_kappa_zero_without_feedback():
    assert true_kappa(small_config(D=0.0, C=0.0))[0] == 0.0


def test_kappa_unsupported_configs():
    with pytest.raises(UnsupportedConfigError):
        true_kappa(small_config(C=0.2))
    with pytest.raises(UnsupportedConfigError):
        true_kappa(paper_instance(n=10, n_x=4, C=0.0))


def test_kappa_below_bound_random_configs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = int(rng.integers(1, 5))
        cfg = DGPConfig(n=2, m=int(rng.integers(2, 6)), d=1, p=p, A=rng.normal(0, 0.5, (p, 1)),
                        B=rng.normal(0, 0.3, (p, p)), C=0.0, D=rng.normal(0, 0.5, (1, p)), mu=np.ones(p),
                        theta0=[1.0], sigma_zeta=1.0)
        kappa, bound = true_kappa(cfg)
        assert kappa <= bound + 1e-12


def test_kappa_against_simulated_covariances():
    # oracle: Monte Carlo conditional covariances of the treatments
    cfg = small_config(n=400000, C=0.0, sigma_eps=0.0, sigma_eta=1.0, sigma_zeta=1.0, D=[[0.3, -0.2]])
    pan = generate(cfg, seed=0)
    gm = GaussianLinearModel(cfg)
    total = 0.0
    for j in (2, 3):
        resid_t = pan.T(1)[:, 0] - pan.X(1) @ gm.projection(gm.T[1], 1)[0]
        resid_j = pan.T(j)[:, 0] - pan.X(1) @ gm.projection(gm.T[j], 1)[0]
        total += abs(np.mean(resid_t * resid_j))
    kappa, _ = true_kappa(cfg)
    assert 2 * total / cfg.sigma_zeta ** 2 == pytest.approx(kappa, abs=0.02)


def test_oracle_estimator_full_coverage():
    rep = monte_carlo(small_config(n=50), 5, {"variant": "oracle"}, seed=0)
    assert np.all(rep.coverage == 1.0)


def test_coverage_monotone_in_alpha():
    rep = monte_carlo(small_config(n=300), 20, {"variant": "dyndml", "learner": {"kind": "ols"}}, seed=1)
    assert np.all(rep.coverage_at(0.10) <= rep.coverage_at(0.05))
    assert rep.n_ok == 20 and not rep.failures


def test_results_do_not_depend_on_workers():
    pipe = {"variant": "dyndml", "learner": {"kind": "ols"}}
    a = monte_carlo(small_config(n=200), 4, pipe, seed=3, workers=1)
    b = monte_carlo(small_config(n=200), 4, pipe, seed=3, workers=2)
    np.testing.assert_array_equal(a.estimates, b.estimates)


def test_failures_recorded():
    cfg = small_config(n=50, sigma_zeta=0.0, D=0.0, C=0.0)
    rep = monte_carlo(cfg, 3, {"variant": "dyndml", "learner": {"kind": "ols"}}, seed=0)
    assert len(rep.failures) == 3 and rep.n_ok == 0


def test_report_outputs(tmp_path):
    rep = monte_carlo(small_config(n=100), 3, {"variant": "dyndml", "learner": {"kind": "ols"}}, seed=0)
    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    rep.write_plot_data(tmp_path / "p.csv")
    doc = json.loads((tmp_path / "r.json").read_text())
    assert set(doc["coverage"]) == {"psi_1[0]", "psi_2[0]", "psi_3[0]"}
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 1 + 3 * 3


def test_benchmark_smoke_schema():
    rep = benchmarks(benchmark_instance(n=200, n_x=10, s=2), 1, seed=0)
    assert set(rep.estimates) == set(BENCHMARK_METHODS)
    rows = rep.rows()
    assert len(rows) == len(BENCHMARK_METHODS) * 3
    assert {"method", "lag", "bias", "dyndml_win_rate"} <= set(rows[0])


def test_benchmarks_unbiased_without_confounding():
    cfg = benchmark_instance(n=400, n_x=10, s=2).with_(C=np.zeros((1, 1)), D=np.zeros((1, 10)))
    rep = benchmarks(cfg, 30, seed=0)
    for method in BENCHMARK_METHODS:
        err = rep.estimates[method] - rep.truth[None]
        mc_se = err.std(axis=0, ddof=1) / np.sqrt(err.shape[0])
        ok = np.abs(err.mean(axis=0)) <= 3 * mc_se + 1e-3
        if method.startswith("fin-ctrls"):
            # final-period states mediate earlier treatments, so only the lag-0 effect is unbiased
            assert ok[0].all() and not ok[1:].any(), method
        else:
            assert ok.all(), method


def test_config_json_round_trip(tmp_path):
    cfg = paper_instance(n=20, n_x=5, hetero=True)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = DGPConfig.from_json(path)
    assert np.array_equal(back.A, cfg.A) and back.hetero_index == cfg.hetero_index
    assert DGPConfig.from_dict({"instance": "paper", "n": 10, "n_x": 3}).p == 3
    with pytest.raises(ValidationError):
        DGPConfig.from_dict({"n": 10, "colour": 1})
