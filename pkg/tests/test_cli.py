import json

import pytest

from implicitsim.cli import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, main


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def dataset(tmp_path):
    cfg = _write(tmp_path / "sim.json", {"n": 300, "p": 30, "s": 2, "link": "identity"})
    out = str(tmp_path / "data.json")
    assert main(["simulate", "--config", cfg, "--seed", "5", "--out", out]) == EXIT_OK
    return out


def test_fit_and_predict(tmp_path, dataset):
    solver = _write(tmp_path / "fit.json", {"solver": {"t_max": 800, "eta": 0.02}})
    traj = str(tmp_path / "traj.csv")
    assert main(["fit-vector", "--config", solver, "--data", dataset, "--subset", "train",
                 "--out", traj]) == EXIT_OK
    header = open(traj).readline().strip()
    assert header == "t,loss,dist_sq,max_off_support"
    report = str(tmp_path / "sel.csv")
    assert main(["predict", "--data", dataset, "--trajectory", traj, "--out", report]) == EXIT_OK
    lines = open(report).read().splitlines()
    assert lines[0] == "candidate_t,train_loss,test_risk,selected" and len(lines) == 11


def test_matrix_flow(tmp_path):
    cfg = _write(tmp_path / "sim.json", {"n": 200, "d": 5, "r": 1, "link": "f5"})
    data = str(tmp_path / "m.json")
    assert main(["simulate", "--config", cfg, "--out", data]) == EXIT_OK
    fit = _write(tmp_path / "fit.json", {"solver": {"t_max": 100},
                                         "robust": {"kind": "kappa"}})
    assert main(["fit-matrix", "--config", fit, "--data", data,
                 "--out", str(tmp_path / "t.csv")]) == EXIT_OK
    assert main(["fit-vector", "--data", data, "--out", str(tmp_path / "v.csv")]) == EXIT_CONFIG


def test_config_errors(tmp_path, dataset):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    missing = _write(tmp_path / "m.json", {"p": 10})
    assert main(["simulate", "--config", missing, "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["fit-vector", "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["benchmark", "--config", _write(tmp_path / "b.json", {"kind": "nope"})]) \
        == EXIT_CONFIG
    assert main(["fit-vector", "--data", dataset, "--seed", "-1"]) == EXIT_CONFIG
    tau_on_matrix = _write(tmp_path / "r.json", {"robust": {"kind": "kappa"}})
    assert main(["fit-vector", "--config", tau_on_matrix, "--data", dataset,
                 "--out", str(tmp_path / "y")]) == EXIT_CONFIG


def test_divergence_exit_code(tmp_path, dataset):
    cfg = _write(tmp_path / "d.json", {"solver": {"alpha": 1.0, "eta": 50.0, "t_max": 100}})
    assert main(["fit-vector", "--config", cfg, "--data", dataset,
                 "--out", str(tmp_path / "t.csv")]) == EXIT_DIVERGENCE
    bench = _write(tmp_path / "b.json", {"kind": "Trajectory", "p": 10, "s": 2,
                                         "grid": {"n": [50]},
                                         "solver": {"alpha": 1.0, "eta": 50.0, "t_max": 100}})
    assert main(["benchmark", "--config", bench, "--out", str(tmp_path / "b.csv")]) \
        == EXIT_DIVERGENCE


def test_benchmark_seed_override(tmp_path):
    cfg = _write(tmp_path / "b.json", {"kind": "RateSweepVector", "p": 30, "s": 2, "trials": 2,
                                       "grid": {"rates": [0.4]}, "solver": {"t_max": 300}})
    a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    assert main(["benchmark", "--config", cfg, "--seed", "1", "--out", a]) == EXIT_OK
    assert main(["benchmark", "--config", cfg, "--seed", "2", "--out", b]) == EXIT_OK
    assert open(a).readline().startswith("#schema=v1")
    assert open(a).read() != open(b).read()
