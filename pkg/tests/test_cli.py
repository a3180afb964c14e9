import csv
import json

import numpy as np
import pytest

from seizfit.cli import main
from seizfit.data import DEFAULT_T0, format_instant

FIT_OUTPUTS = {"report.json", "trajectory.csv", "fit.svg", "compartments.svg", "resolved-config.json"}


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "obs"
    assert main(["generate", "--out", str(out), "--bins", "200"]) == 0
    return out


@pytest.fixture(scope="module")
def fit_run(generated, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit") / "run"
    code = main(["fit", "--input", str(generated / "observations.csv"), "--out", str(out), "--seed", "0"])
    return code, out


def test_generate_writes_binned_series(generated):
    assert {p.name for p in generated.iterdir()} == {"observations.csv", "observations.json", "resolved-config.json"}
    meta = json.loads((generated / "observations.json").read_text())
    assert meta == {"t0": format_instant(DEFAULT_T0), "bin_width_seconds": 900}
    rows = list(csv.reader((generated / "observations.csv").open()))
    assert rows[0] == ["bin_index", "cumulative_count"]
    assert rows[1] == ["0", "1"] and len(rows) == 201


def test_generate_is_byte_identical_for_seed(tmp_path):
    args = ["generate", "--noise", "0.05", "--seed", "3", "--bins", "50"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("observations.csv", "observations.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_rejects_negative_noise(tmp_path):
    assert main(["generate", "--noise", "-0.1", "--out", str(tmp_path / "g")]) == 1
    assert not (tmp_path / "g").exists()


def test_fit_on_generated_series(fit_run):
    code, out = fit_run
    assert code == 0
    assert {p.name for p in out.iterdir()} == FIT_OUTPUTS
    report = json.loads((out / "report.json").read_text())
    assert np.isfinite(report["rel_error"]) and report["rel_error"] <= 1e-3
    config = json.loads((out / "resolved-config.json").read_text())
    assert config["seed"] == 0 and config["model"] == "seiz"
    assert config["digests"]["input"].startswith("sha256:")


def test_fit_from_events_file(tmp_path):
    lines = ["timestamp"] + [f"2020-06-01T00:{m:02d}:{s:02d}Z" for m in range(0, 59, 2) for s in (5, 40)
                             for _ in range(1 + m // 4)]
    events = tmp_path / "events.csv"
    events.write_text("\n".join(lines) + "\n")
    out = tmp_path / "run"
    code = main(["fit", "--input", str(events), "--out", str(out), "--bin-seconds", "120",
                 "--starts", "2", "--max-iter", "30"])
    assert code in (0, 2)
    report = json.loads((out / "report.json").read_text())
    assert len(report["observed"]) == 30
    assert np.isfinite(report["rel_error"])


def test_fit_missing_input_leaves_nothing(tmp_path):
    out = tmp_path / "run"
    assert main(["fit", "--input", str(tmp_path / "nope.csv"), "--out", str(out)]) == 1
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []


def test_fit_refuses_non_empty_output(generated, tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["fit", "--input", str(generated / "observations.csv"), "--out", str(out)]) == 1
    assert [p.name for p in out.iterdir()] == ["keep.txt"]


def test_fit_budget_stop_exits_two(generated, tmp_path):
    out = tmp_path / "run"
    code = main(["fit", "--input", str(generated / "observations.csv"), "--out", str(out),
                 "--starts", "1", "--max-iter", "1"])
    assert code == 2
    assert (out / "report.json").exists()
    assert json.loads((out / "report.json").read_text())["converged"] == "budget"


def test_fit_bad_bounds_json(generated, tmp_path):
    assert main(["fit", "--input", str(generated / "observations.csv"), "--out", str(tmp_path / "r"),
                 "--bounds", '{"nonsense": [0, 1]}']) == 1


def test_simulate_conserves_population(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"trajectory.csv", "compartments.svg", "resolved-config.json"}
    rows = np.array(list(csv.reader((out / "trajectory.csv").open()))[1:], dtype=float)
    n = 27963.0
    assert np.abs(rows[:, 1:].sum(axis=1) - n).max() <= 1e-6 * n


def test_simulate_frozen_dynamics(tmp_path):
    theta = {"beta": 0, "b": 0, "rho": 0, "p": 0.5, "l": 0.5, "epsilon": 0,
             "S0": 100, "E0": 5, "I0": 3, "Z0": 2}
    out = tmp_path / "sim"
    assert main(["simulate", "--out", str(out), "--theta", json.dumps(theta), "--bins", "20"]) == 0
    rows = np.array(list(csv.reader((out / "trajectory.csv").open()))[1:], dtype=float)
    assert np.all(rows[:, 1:] == [100, 5, 3, 2])


def test_simulate_window(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--out", str(out), "--window", "40"]) == 0
    assert len(list(csv.reader((out / "trajectory.csv").open()))) == 41


def test_simulate_invalid_theta(tmp_path):
    theta = {"beta": 1, "b": 1, "rho": 0, "p": 1.5, "l": 0.5, "epsilon": 0, "S0": 100, "E0": 0, "I0": 1, "Z0": 0}
    assert main(["simulate", "--out", str(tmp_path / "s"), "--theta", json.dumps(theta)]) == 1
    assert main(["simulate", "--out", str(tmp_path / "s"), "--model", "sis"]) == 1


def test_simulate_other_models(tmp_path):
    theta = {"lambda_": 0.1, "gamma": 0.05, "S0": 1000, "I0": 1, "R0": 0}
    out = tmp_path / "sir"
    assert main(["simulate", "--model", "sir", "--out", str(out), "--theta", json.dumps(theta)]) == 0
    header = next(csv.reader((out / "trajectory.csv").open()))
    assert header == ["t", "S", "I", "R"]


def test_usage_errors_exit_one(tmp_path):
    assert main([]) == 1
    assert main(["fit", "--out", str(tmp_path / "x")]) == 1
    assert main(["simulate", "--out", str(tmp_path / "x"), "--emit", "pdf"]) == 1
