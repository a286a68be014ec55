import json

import pytest

from builders import small_config_doc
from restoration_attack.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from restoration_attack.experiment import OUTPUT_ENV
from restoration_attack.feeder import load_feeder, bundled_feeder_path


@pytest.fixture(autouse=True)
def _no_env_override(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)


def test_synth_data_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["synth-data", "--profile", "LOW", "--days", "30", "--seed", "9", "--out", str(a)]) == EXIT_OK
    assert main(["synth-data", "--profile", "LOW", "--days", "30", "--seed", "9", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("argv", [
    ["synth-data", "--profile", "NOPE", "--out", "x.csv"],
    ["synth-data", "--profile", "LOW", "--days", "10", "--out", "x.csv"],
])
def test_synth_data_config_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_CONFIG


def test_train_and_attack(tmp_path, capsys):
    data, model = tmp_path / "d.csv", tmp_path / "model.json"
    assert main(["synth-data", "--profile", "BASE", "--days", "30", "--out", str(data)]) == EXIT_OK
    assert main(["train", "--data", str(data), "--out", str(model), "--hidden", "3", "--epochs", "5",
                 "--train-days", "26"]) == EXIT_OK
    out = tmp_path / "attack.json"
    capsys.readouterr()
    assert main(["attack", "--model", str(model), "--data", str(data), "--method", "saa", "--iterations", "3",
                 "--train-days", "26", "--windows", "4", "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["windows"] == 4 and doc["mse_increase"] > 0
    assert json.loads(capsys.readouterr().out) == doc


def test_plan_then_validate(tmp_path, capsys):
    feeder = load_feeder(bundled_feeder_path())
    loads = {ld.id: [ld.kw] * 3 for ld in feeder.loads}
    loads_path = tmp_path / "loads.json"
    loads_path.write_text(json.dumps(loads))
    plan = tmp_path / "plan.json"
    assert main(["plan", "--loads", str(loads_path), "--stages", "3", "--out", str(plan)]) == EXIT_OK
    val = tmp_path / "val.json"
    assert main(["validate", "--plan", str(plan), "--loads", str(loads_path), "--out", str(val)]) == EXIT_OK
    assert json.loads(val.read_text())["all_feasible"]
    assert "all stages feasible" in capsys.readouterr().out


def test_plan_missing_loads_is_config_error(tmp_path):
    assert main(["plan", "--loads", str(tmp_path / "none.json"), "--out", str(tmp_path / "p.json")]) == EXIT_CONFIG


def test_run_config_errors(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(small_config_doc(colour="blue")))
    assert main(["run", "--config", str(cfg)]) == EXIT_CONFIG


def test_report_on_empty_dir_is_stage_failure(tmp_path, capsys):
    assert main(["report", "--output-dir", str(tmp_path)]) == EXIT_STAGE
    assert "report" in capsys.readouterr().err


def test_run_stage_failure_exit_code(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(small_config_doc(attack_methods=[], restoration={"method": "x", "stages": 2, "day": 30})))
    assert main(["run", "--config", str(cfg), "--output-dir", str(tmp_path / "out")]) == EXIT_STAGE


def test_env_var_overrides_output_dir(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(small_config_doc(attack_methods=[], restoration={"stages": 2, "day": 1})))
    env_dir, flag_dir = tmp_path / "from_env", tmp_path / "from_flag"
    monkeypatch.setenv(OUTPUT_ENV, str(env_dir))
    assert main(["run", "--config", str(cfg), "--output-dir", str(flag_dir)]) == EXIT_OK
    assert (env_dir / "report.json").is_file()
    assert not flag_dir.exists()
    (env_dir / "report.json").unlink()
    assert main(["report", "--output-dir", str(flag_dir)]) == EXIT_OK
    assert (env_dir / "report.json").is_file()
