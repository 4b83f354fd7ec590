from __future__ import annotations

import json

import pytest

from clusterpolicy.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, build_estimands, grid_values, main, ConfigError
from clusterpolicy.io import validate_report_dict, write_csv
from clusterpolicy.simulation import DgpConfig, generate_dgp


@pytest.fixture(scope="module")
def csv_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "clusters.csv"
    write_csv(generate_dgp(DgpConfig(m=40, size_dist="uniform:3-6", seed=2)), path)
    return path


def _config(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return str(p)


GRID_CONFIG = """
seed = 4

[estimator]
K = 2
r = 50

[learner]
ensemble = false

[[policies]]
spec = "cips:delta0=1"
grid = {from = 0.5, to = 2.0, points = 16}
estimands = ["mu", "de"]
"""


def test_estimate_grid_cardinality_and_schema(tmp_path, csv_path):
    out = tmp_path / "r.json"
    cfg = _config(tmp_path, GRID_CONFIG)
    assert main(["estimate", "--config", cfg, "--data", str(csv_path), "--out", str(out), "--threads", "1"]) == EXIT_OK
    doc = json.loads(out.read_text())
    validate_report_dict(doc)
    kinds = [r["estimand"] for r in doc["results"]]
    assert kinds.count("mu") == 16 and kinds.count("de") == 16
    deltas = sorted({r["param"] for r in doc["results"]})
    assert deltas[0] == pytest.approx(0.5) and deltas[-1] == pytest.approx(2.0) and len(deltas) == 16
    assert doc["meta"]["seed"] == 4 and doc["meta"]["m"] == 40


def test_estimate_rerun_byte_identical(tmp_path, csv_path):
    cfg = _config(tmp_path, GRID_CONFIG)
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}.json"
        assert main(["estimate", "--config", cfg, "--data", str(csv_path), "--out", str(out)]) == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_missing_policy_column_exits_config(tmp_path, csv_path, capsys):
    code = main(["estimate", "--data", str(csv_path), "--policy", "cms:lambda=0.5,xstar=xstar",
                 "--out", str(tmp_path / "r.json")])
    assert code == EXIT_CONFIG
    assert "xstar" in capsys.readouterr().err


def test_bad_data_exits_data(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("cluster_id,y,a,x1\n1,1,2,0.3\n1,0,1,0.1\n")
    code = main(["estimate", "--data", str(bad), "--policy", "cips:delta0=1", "--out", str(tmp_path / "r.json")])
    assert code == EXIT_DATA
    missing = main(["estimate", "--data", str(tmp_path / "nope.csv"), "--policy", "cips:delta0=1",
                    "--out", str(tmp_path / "r.json")])
    assert missing == EXIT_DATA


def test_bad_config_exits_config(tmp_path, csv_path):
    cfg = _config(tmp_path, "[estimator]\nK = 1\n")
    assert main(["estimate", "--config", cfg, "--data", str(csv_path), "--policy", "cips:delta0=1"]) == EXIT_CONFIG
    cfg = _config(tmp_path, "this is = not [toml")
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "r.json")]) == EXIT_CONFIG
    out = str(tmp_path / "r.json")
    assert main(["estimate", "--data", str(csv_path), "--policy", "cips:delta=1", "--out", out]) == EXIT_CONFIG
    assert main(["estimate", "--data", str(csv_path), "--policy", "cips:delta0=1", "--estimand", "oe",
                 "--out", out]) == EXIT_CONFIG


def test_flags_override_policies(tmp_path, csv_path):
    out = tmp_path / "r.json"
    code = main(["estimate", "--data", str(csv_path), "--policy", "tpb:rho=0.3", "--policy", "tpb:rho=0.5",
                 "--estimand", "oe", "--reference", "tpb:rho=0.4", "--out", str(out), "--seed", "2"])
    assert code == EXIT_OK
    doc = json.loads(out.read_text())
    assert [r["estimand"] for r in doc["results"]] == ["oe", "oe"]
    assert doc["meta"]["seed"] == 2


SIM_CONFIG = """
seed = 1

[learner]
ensemble = false

[simulate]
D = 2
m = 40
size_dist = "uniform:3-5"
estimands = ["mu:cips:delta0=1", "de:tpb:rho=0.3"]
estimators = ["nss", "pss", "ipw", "oracle"]
mc_clusters = 2000
cache_dir = "{cache}"
"""


def test_simulate_smoke(tmp_path):
    cfg = _config(tmp_path, SIM_CONFIG.format(cache=tmp_path / "cache"))
    out = tmp_path / "b.csv"
    assert main(["simulate", "--config", cfg, "--out", str(out), "--threads", "1"]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "estimand,estimator,truth,bias,rmse,ase,ese,cov,rmse_ratio"
    assert len(lines) == 1 + 2 * 4


def test_simulate_unknown_estimator(tmp_path):
    cfg = _config(tmp_path, SIM_CONFIG.format(cache=tmp_path).replace('"oracle"', '"tmle"'))
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b.csv")]) == EXIT_CONFIG


def test_truth_output(tmp_path):
    cfg = _config(tmp_path, '[truth]\nestimands = ["mu:cips:delta0=2", "te:cips:delta0=0.5/cips:delta0=1"]\n'
                            'mc_clusters = 3000\nno_cache = true\n')
    out = tmp_path / "t.json"
    assert main(["truth", "--config", cfg, "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert [r["estimand"] for r in doc["results"]] == ["mu", "te"]
    assert all(r["mc_se"] > 0 for r in doc["results"])
    assert abs(doc["results"][0]["truth"] - 0.300) < 0.02


def test_validate(tmp_path, csv_path, capsys):
    cfg = _config(tmp_path, GRID_CONFIG)
    assert main(["validate", "--config", cfg, "--data", str(csv_path)]) == EXIT_OK
    assert "32 estimands" in capsys.readouterr().out
    out = tmp_path / "r.json"
    main(["estimate", "--data", str(csv_path), "--policy", "cips:delta0=1", "--out", str(out)])
    assert main(["validate", "--report", str(out)]) == EXIT_OK
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"meta": {}, "results": [{"estimand": "mu"}]}))
    assert main(["validate", "--report", str(broken)]) != EXIT_OK


def test_grid_values():
    assert grid_values({"values": [0.1, 0.2]}) == [0.1, 0.2]
    assert len(grid_values({"from": 0, "to": 0.5, "points": 11})) == 11
    with pytest.raises(ConfigError):
        grid_values({"from": 0})
    with pytest.raises(ConfigError):
        grid_values({"values": []})


def test_build_estimands_needs_reference():
    with pytest.raises(ConfigError):
        build_estimands({"policies": [{"spec": "tpb:rho=0.3", "estimands": ["se1"]}]})
    with pytest.raises(ConfigError):
        build_estimands({})
