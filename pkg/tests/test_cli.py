import json

import pytest

from gradflow.cli import main
from gradflow.experiments import mean_shift_config
from gradflow.objectives import ObjectiveSpec
from gradflow.schedules import CoolingSchedule

SMALL = dict(arch=(3, 16, 16, 2), batch_size=64, pool_size=320, n_eval=200, path_len_samples=16,
             path_len_steps=20, pretrain_epochs=3, epochs=4, eval_every=2)


@pytest.fixture
def config(tmp_path):
    cfg = mean_shift_config(**SMALL, objective=ObjectiveSpec("gft"), schedule=CoolingSchedule(),
                            output_dir=str(tmp_path / "out"))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def test_pretrain_finetune_report(tmp_path, config, capsys):
    assert main(["pretrain", str(config), "--out", str(tmp_path / "pre")]) == 0
    ckpt = tmp_path / "pre" / "checkpoint.json"
    assert ckpt.exists()
    assert main(["finetune", str(config), "--base", str(ckpt), "--out", str(tmp_path / "a")]) == 0
    assert main(["finetune", str(config), "--base", str(ckpt), "--out", str(tmp_path / "b")]) == 0
    assert main(["report", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "rep"),
                 "--window", "3"]) == 0
    assert (tmp_path / "rep" / "merged.csv").exists()
    assert (tmp_path / "rep" / "fd.svg").exists()


def test_sweep_command(tmp_path, config, capsys):
    assert main(["sweep", str(config), "--beta-mins", "0,0.5", "--out", str(tmp_path / "sw")]) == 0
    out = capsys.readouterr().out
    assert "beta_min=0\t" in out and "beta_min=0.5\t" in out


def test_config_errors_exit_2(tmp_path, config):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1}')
    assert main(["pretrain", str(bad)]) == 2
    assert main(["pretrain", str(tmp_path / "missing.json")]) == 2
    assert main(["finetune", str(config), "--base", str(tmp_path / "nope.json")]) == 2
    assert main(["sweep", str(config), "--beta-mins", "1,0"]) == 2
    assert main(["sweep", str(config), "--beta-mins", "a,b"]) == 2
    assert main(["report", str(tmp_path / "no_run")]) == 2


def test_run_failure_exit_1(tmp_path, config):
    doc = json.loads(config.read_text())
    doc["optimizer"]["lr"] = 1e300
    diverge = tmp_path / "div.json"
    diverge.write_text(json.dumps(doc))
    assert main(["pretrain", str(diverge), "--out", str(tmp_path / "d")]) == 1


def test_verify_command(tmp_path, capsys):
    assert main(["verify", "--betas", "1", "--steps", "1500", "--out", str(tmp_path / "v.json")]) == 0
    reports = json.loads((tmp_path / "v.json").read_text())
    assert reports[0]["beta"] == 1.0 and reports[0]["mean_rel_err"] < 0.10
    assert "PASS" in capsys.readouterr().out


def test_verify_failure_exit_1():
    assert main(["verify", "--betas", "1", "--steps", "2", "--tol", "1e-9"]) == 1
