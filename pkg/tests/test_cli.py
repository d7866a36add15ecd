import csv
import json

import numpy as np
import pytest
import yaml

from blqstack.cli import ConfigError, finance_preset, load_config, main
from blqstack.errors import InvalidArgument

BASE = {
    "horizon": 1.0, "steps": 50,
    "coefficients": {"A": 0.2, "B1": 0.4, "B2": 0.4, "Q1": 0.3, "Q2": 0.3, "H1": 0.2, "H2": 0.5},
    "constraint": {"set": {"type": "box", "lower": [0.0], "upper": [2.0]}, "alpha": [1.0],
                   "beta": 1.0},
    "solver": "general",
}


def write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def report(out):
    return json.loads((out / "report.json").read_text())


def test_negative_horizon_is_a_schema_error(tmp_path):
    out = tmp_path / "out"
    code = main(["solve", "--config", write(tmp_path, {**BASE, "horizon": -1.0}), "--out", str(out)])
    assert code == 2
    assert report(out)["error"]["error_class"] == "schema-violation"


def test_solve_writes_report_and_trajectories(tmp_path):
    out = tmp_path / "out"
    assert main(["solve", "--config", write(tmp_path, BASE), "--out", str(out)]) == 0
    rep = report(out)
    assert rep["status"] == "ok" and rep["manifest"] == ["trajectories.csv", "report.json"]
    assert len(rep["config_digest"]) == 64


def test_finance_demo_csv_has_units(tmp_path):
    out = tmp_path / "demo"
    assert main(["finance-demo", "--out", str(out), "--scenarios", "500"]) == 0
    with open(out / "trajectories.csv") as fh:
        header = next(csv.reader(fh))
    assert header[0] == "t [time]"
    assert all("[" in col and col.endswith("]") for col in header)


def test_certify_preset_reports_explicit_theta(tmp_path):
    cfg = finance_preset("affine")
    out = tmp_path / "cert"
    path = write(tmp_path, json.loads(json.dumps(cfg.raw)))
    assert main(["certify", "--config", path, "--out", str(out)]) == 0
    r61 = report(out)["certificates"]["remark61"]
    assert r61["variant"] == "remark61" and "theta" in r61
    assert all("margin" in entry for entry in r61["condition_log"])


def test_zero_risk_premium_is_invalid(tmp_path):
    out = tmp_path / "bad"
    assert main(["finance-demo", "--mu", "0.02", "--r", "0.02", "--out", str(out)]) == 2
    assert report(out)["error"]["error_class"] == "invalid-argument"
    with pytest.raises(InvalidArgument):
        finance_preset("affine", r=0.05, mu=0.05)


def test_same_seed_is_bitwise_reproducible(tmp_path):
    contracting = {"A": 2.0, "B1": 0.3, "B2": 0.3, "C": 0.5, "Q1": 0.1, "Q2": 0.1, "S1": 0.1,
                   "S2": 0.1, "H1": 0.1, "H2": 0.1, "G1": 4.0}
    cfg = {**BASE, "steps": 20, "coefficients": contracting,
           "constraint": {"set": {"type": "box", "lower": [0.5], "upper": [2.0]}, "affine": False},
           "solver": "p1", "method": "picard", "ensemble": {"M": 400, "seed": 9}}
    path = write(tmp_path, cfg)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "--config", path, "--out", str(a)]) == 0
    assert main(["solve", "--config", path, "--out", str(b)]) == 0
    assert (a / "trajectories.csv").read_bytes() == (b / "trajectories.csv").read_bytes()
    ra, rb = report(a), report(b)
    for r in (ra, rb):
        r.pop("wall_clock_seconds")
    assert ra == rb


def test_symmetry_handling():
    bad = {**BASE, "dims": {"n": 2}, "coefficients": {"Q1": [[1.0, 0.5], [0.4, 1.0]]},
           "constraint": None, "solver": "certify"}
    with pytest.raises(ConfigError):
        load_config(bad)
    tiny = {**bad, "coefficients": {"Q1": [[1.0, 0.5], [0.5 + 1e-14, 1.0]]}}
    cfg = load_config(tiny)
    Q = cfg.coefficients["Q1"]
    assert np.array_equal(Q, np.swapaxes(Q, 1, 2))
    assert 0 < cfg.asymmetry["Q1"] <= 1e-12


@pytest.mark.parametrize("patch", [
    {"steps": 0}, {"solver": "nope"}, {"surprise": 1}, {"coefficients": {"A": [1.0, 2.0]}},
    {"constraint": {"set": {"type": "box", "lower": [0.0, 1.0]}, "alpha": [1.0]}},
    {"picard": {"speed": 3}}, {"ensemble": {"M": -1}},
])
def test_schema_rejections(patch):
    with pytest.raises(ConfigError):
        load_config({**BASE, **patch})


def test_solver_failure_exits_three_with_report(tmp_path):
    out = tmp_path / "both"
    assert main(["finance-demo", "--preset", "both", "--out", str(out)]) == 3
    rep = report(out)
    assert rep["status"] == "error" and rep["error"]["error_class"] == "refused"
    assert "report.json" in rep["manifest"]
