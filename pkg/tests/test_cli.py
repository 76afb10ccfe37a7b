import json
from pathlib import Path

import pytest

from nlhomog.cli import build_report, load_config, main, run
from nlhomog.errors import ConfigurationError
from nlhomog.stats import read_csv

ROOT = Path(__file__).resolve().parent.parent
CONST_2D = ["law.kind=\"iid_uniform\"", "law.range_low=2.0", "law.range_high=2.0"]


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("NLHOMOG_OUTPUT_ROOT", str(tmp_path / "runs"))
    return tmp_path / "runs"


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config("cell", {"law": {"kind": "iid_uniform", "colour": 1}})
    with pytest.raises(ConfigurationError):
        load_config("cell", {"lawz": {}})
    with pytest.raises(ConfigurationError):
        load_config("cell", None, ["experiment.bogus=1"])
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"mesh": {"h": 0.5, "order": 2}}))
    assert main(["cell", "--config", str(cfg)]) == 2
    assert main(["cell", "--config", str(tmp_path / "missing.json")]) == 2
    assert run("cell", None, ["mesh.h=0.3"])[0] == 2
    assert run("excess", None, ["experiment.R=30", "experiment.N=3"])[0] == 2
    assert run("twoscale", None, ["experiment.mesoscales=[1,1,2]"])[0] == 2


def test_cell_1d_config_checks_pass():
    code, path = run("cell", ROOT / "configs" / "cell_1d.json", check=True)
    assert code == 0
    checks = json.loads((path / "checks.json").read_text())
    assert checks and all(checks.values())
    rows = read_csv(path / "results.csv")
    assert len(rows) == 2 * 64
    assert {"member", "seed", "nu", "oracle"} <= set(rows[0])
    cfg = json.loads((path / "config.json").read_text())
    assert "workers" not in cfg["ensemble"]
    assert path.name.startswith("cell-")


def test_constant_commute_check_and_report(capsys):
    code, path = run("commute", ROOT / "configs" / "const.json", check=True)
    assert code == 0
    assert json.loads((path / "checks.json").read_text()) == {"constant_control": True}
    assert main(["report", "--in", str(path)]) == 0
    rep = json.loads((path / "report.json").read_text())
    assert {"rate_fits", "tail_fits", "command", "config_hash"} <= set(rep)
    assert all(str(v).startswith("unavailable") for v in rep["rate_fits"].values())
    assert main(["report"]) == 2


def test_scan_report_has_tail_fit():
    overrides = CONST_2D + ["nonlinearity.kind=\"quadratic\"", "nonlinearity.lambda_max=3.0", "ensemble.size=8",
                            "experiment.R=6.75"]
    code, path = run("linreg", None, overrides)
    assert code == 0
    rep = build_report(path)
    assert rep["finite_fraction"] == 1.0
    assert isinstance(rep["tail_fits"]["sigma=1"], dict)


def test_worker_count_does_not_change_outputs():
    overrides = ["law.kind=\"iid_uniform\"", "law.range_low=0.0", "law.range_high=2.0", "ensemble.size=6",
                 "experiment.xis=[[1.0,0.0],[0.5,0.5]]"]
    _, a = run("cell", None, overrides, workers=1)
    _, b = run("cell", None, overrides, workers=2)
    assert a != b
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    assert (a / "config.json").read_bytes() == (b / "config.json").read_bytes()


def test_solver_failure_exit_code():
    code, _ = run("superlin", None, CONST_2D + ["experiment.n=1", "solver.tol=1e-30", "ensemble.size=2"])
    assert code == 3


def test_check_failure_exit_code():
    code, path = run("superlin", None, CONST_2D + ["experiment.n=1", "experiment.min_slope=5.0", "ensemble.size=2"],
                     check=True)
    assert code == 4
    assert json.loads((path / "checks.json").read_text()) == {"slope": False}


def test_sample_writes_cells():
    code, path = run("sample", None, ["experiment.n=1"])
    assert code == 0
    rows = read_csv(path / "cells.csv")
    assert len(rows) == 9 and rows[0]["cell"] == "-1;-1"
