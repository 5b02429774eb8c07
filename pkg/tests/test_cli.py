import json
import os
import subprocess
import sys

import pytest

from dyndml.cli import main, build_parser, resolve_config
from dyndml.data import write_panel_csv
from dyndml.simulate import generate

from conftest import small_config


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture
def panel_csv(tmp_path):
    path = tmp_path / "panel.csv"
    write_panel_csv(generate(small_config(n=300), seed=0), path)
    return str(path)


def test_fit_writes_estimate(panel_csv, tmp_path):
    out = tmp_path / "est.json"
    assert main(["fit", "--data", panel_csv, "--variant", "dyndml", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    res = doc["result"]
    assert {"psi", "V", "ci", "stderr"} <= set(res)
    assert doc["config"]["data"] == panel_csv
    assert (tmp_path / "est.csv").read_text().startswith("period,coord,estimate")


def test_missing_data_exit_2(tmp_path, capsys):
    assert main(["fit", "--variant", "dyndml", "--out", str(tmp_path / "x.json")]) == 2
    err = capsys.readouterr().err
    assert "usage" in err and "--data" in err


def test_bad_config_exit_2(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"learner": {"kind": "forest"}})
    assert main(["montecarlo", "--config", cfg, "--reps", "1"]) == 2
    cfg = write_json(tmp_path / "c2.json", {"instance": "paper", "n": 20, "flavour": 1})
    assert main(["montecarlo", "--config", cfg, "--reps", "1"]) == 2
    (tmp_path / "bad.json").write_text("{nope")
    assert main(["montecarlo", "--config", str(tmp_path / "bad.json")]) == 2


def test_singular_design_exit_3(tmp_path, capsys):
    pan = generate(small_config(n=100, sigma_zeta=0.0, D=0.0, C=0.0), seed=0)
    path = tmp_path / "flat.csv"
    write_panel_csv(pan, path)
    assert main(["fit", "--data", str(path), "--out", str(tmp_path / "e.json")]) == 3
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "IdentificationError" and err["stage"] == 3


def test_montecarlo_report_and_determinism(tmp_path):
    cfg = write_json(tmp_path / "s7.json", {"instance": "paper", "n": 200, "n_x": 6,
                                            "learner": {"kind": "ols"}})
    runs = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        out = d / "report.json"
        os.chdir(d)
        assert main(["montecarlo", "--config", cfg, "--reps", "3", "--seed", "5", "--out", "report.json"]) == 0
        runs.append(out.read_bytes())
        assert (d / "report.csv").exists() and (d / "report_plot.csv").exists()
    assert runs[0] == runs[1]
    doc = json.loads(runs[0])
    assert len(doc["result"]["coverage"]) == 6
    assert doc["config"]["dgp"]["n"] == 200


@pytest.mark.parametrize("variant", ["snmm", "sparse"])
def test_other_fit_variants(panel_csv, tmp_path, variant):
    out = tmp_path / f"{variant}.json"
    assert main(["fit", "--data", panel_csv, "--variant", variant, "--out", str(out)]) == 0
    assert json.loads(out.read_text())["result"]["method"] == variant


def test_rlearner_variant(tmp_path):
    from dyndml.simulate import paper_instance

    path = tmp_path / "het.csv"
    write_panel_csv(generate(paper_instance(n=300, n_x=4, n_t=1, hetero=True), seed=0), path)
    out = tmp_path / "h.json"
    assert main(["fit", "--data", str(path), "--variant", "rlearner", "--out", str(out)]) == 0
    assert "theta" in json.loads(out.read_text())["result"]


def test_opeval_and_block(panel_csv, tmp_path):
    out = tmp_path / "op.json"
    cfg = write_json(tmp_path / "pol.json", {"policies": ["zero", "replay", {"kind": "static", "tau": [[1], [1], [1]]}]})
    assert main(["opeval", "--data", panel_csv, "--config", cfg, "--out", str(out)]) == 0
    pols = json.loads(out.read_text())["result"]["policies"]
    assert set(pols) == {"zero", "replay", "static"}
    cfg = write_json(tmp_path / "blk.json", {"dgp": {"n": 2, "m": 3, "d": 1, "p": 2, "A": 0.5, "B": [[0.5, 0], [0, 0.5]],
                                                     "C": 0.2, "D": 0.2, "mu": [0.8, 0.8], "theta0": [1.0]},
                                             "n_blocks": 40})
    out = tmp_path / "blk_out.json"
    assert main(["block", "--config", cfg, "--out", str(out)]) == 0
    assert json.loads(out.read_text())["result"]["method"] == "block"


def test_simulate_then_benchmarks(tmp_path):
    out = tmp_path / "sim.csv"
    cfg = write_json(tmp_path / "d.json", {"instance": "benchmark", "n": 100, "n_x": 5, "s": 2})
    assert main(["simulate", "--config", cfg, "--seed", "2", "--out", str(out)]) == 0
    assert out.exists() and (tmp_path / "sim.config.json").exists()
    bout = tmp_path / "bench.json"
    assert main(["benchmarks", "--config", cfg, "--reps", "1", "--out", str(bout)]) == 0
    assert json.loads(bout.read_text())["result"]["reps"] == 1


def test_workers_env_fallback():
    args = build_parser().parse_args(["montecarlo"])
    assert resolve_config(args, {"DYNDML_WORKERS": "3"}).workers == 3
    args = build_parser().parse_args(["montecarlo", "--workers", "2"])
    assert resolve_config(args, {"DYNDML_WORKERS": "3"}).workers == 2


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "dyndml.cli", "fit"], capture_output=True, text=True)
    assert proc.returncode == 2
