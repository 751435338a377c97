import json
import logging

import pandas as pd
import pytest

from pvgpr import cli
from pvgpr.data import Dataset, write_csv
from pvgpr.synthetic import SYNTHETIC_SITE, synthetic_frame

FAST = ["--n-starts", "1", "--max-evals", "150", "--max-opt-points", "120",
        "--cv-k", "3", "--holdout-days", "10"]


@pytest.fixture
def workspace(tmp_path):
    frame = synthetic_frame(seed=5).iloc[24 * 150: 24 * 200].reset_index(drop=True)
    write_csv(Dataset(SYNTHETIC_SITE, frame), tmp_path / "data.csv")
    cfg = {"data": {"path": "data.csv"}, "site": SYNTHETIC_SITE.to_dict(), "out_dir": "run",
           "clustering": {"n_restarts": 3}}
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    return tmp_path


def test_synthetic_command_writes_year_and_config(tmp_path, capsys):
    assert cli.main(["synthetic", "--out", str(tmp_path)]) == 0
    frame = pd.read_csv(tmp_path / "synthetic.csv")
    assert len(frame) == 8760
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["site"]["capacity_mw"] == 30.0
    assert cli.main(["validate", "--config", str(tmp_path / "config.json")]) == 0


def test_validate_exit_codes(workspace, capsys):
    cfgp = str(workspace / "config.json")
    assert cli.main(["validate", "--config", cfgp]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["range_violations"] == 0

    frame = pd.read_csv(workspace / "data.csv")
    frame.loc[3, "cloud_okta"] = 11
    frame.to_csv(workspace / "bad.csv", index=False)
    assert cli.main(["validate", "--config", cfgp, "--data", str(workspace / "bad.csv")]) == 1
    report = json.loads((workspace / "run" / "validation.json").read_text())
    assert report["range_violations"][0][1] == "cloud_okta"

    frame.drop(columns=["azimuth_deg"]).to_csv(workspace / "short.csv", index=False)
    assert cli.main(["validate", "--config", cfgp, "--data", str(workspace / "short.csv")]) == 2
    assert "SchemaMismatchError" in capsys.readouterr().err


def test_train_predict_evaluate_flow(workspace, capsys, monkeypatch):
    monkeypatch.chdir(workspace)
    cfgp = str(workspace / "config.json")
    assert cli.main(["train", "--config", cfgp, "--k", "2", "--out", "myrun", *FAST]) == 0
    out = json.loads(capsys.readouterr().out)
    man = json.loads((workspace / "myrun" / "manifest.json").read_text())
    assert out["manifest"].endswith("manifest.json")
    assert man["config"]["clustering"]["k"] == 2
    assert man["config"]["cv"]["k"] == 3
    assert man["config"]["gpr"]["n_starts"] == 1

    assert cli.main(["predict", "--out", "myrun", "--horizon", "myrun/holdout.csv"]) == 0
    fc = pd.read_csv(workspace / "myrun" / "forecast.csv")
    assert len(fc) == 240

    assert cli.main(["evaluate", "--manifest", "myrun/manifest.json"]) == 0
    assert (workspace / "myrun" / "metrics.json").exists()
    assert (workspace / "myrun" / "plot_data.csv").exists()


def test_sensitivity_command(workspace, capsys):
    code = cli.main(["sensitivity", "--config", str(workspace / "config.json"), "--k-range", "1,3",
                     *FAST])
    assert code == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["k"] for r in rows] == [1, 3]
    assert (workspace / "run" / "sensitivity.csv").exists()


def test_set_override_and_bad_set(workspace):
    cfgp = str(workspace / "config.json")
    assert cli.main(["validate", "--config", cfgp, "--set", "site.capacity_mw=1"]) == 1
    assert cli.main(["validate", "--config", cfgp, "--set", "nonsense"]) == 2


def test_runtime_error_exit_code(workspace, capsys):
    code = cli.main(["train", "--config", str(workspace / "config.json"), "--holdout-days", "500"])
    assert code == 2
    assert "InsufficientDaysError" in capsys.readouterr().err


def test_predict_without_run_location(tmp_path):
    assert cli.main(["predict", "--horizon", str(tmp_path / "h.csv")]) == 2


def test_log_level_from_environment(workspace, monkeypatch):
    monkeypatch.setenv(cli.LOG_ENV, "debug")
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    cli.main(["validate", "--config", str(workspace / "config.json")])
    assert root.level == logging.DEBUG


def test_k_range_parsing():
    assert cli._k_range("1-4") == [1, 2, 3, 4]
    assert cli._k_range("1,4") == [1, 4]


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate"])
    assert info.value.code == 2
