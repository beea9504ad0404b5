import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from gradflow import distributions as dist
from gradflow import experiments as ex
from gradflow.experiments import (
    MERGED_COLUMNS,
    METRIC_COLUMNS,
    ConfigError,
    RunConfig,
    RunFailed,
    RunRecord,
    emit_report,
    finetune,
    mean_shift_config,
    pretrain,
    read_metrics,
    read_stability,
    run_schedule,
    run_sweep,
)
from gradflow.metrics import frechet_gaussian_distance
from gradflow.model import AdamHyper, as_field, load_checkpoint, mlp_init
from gradflow.objectives import ObjectiveSpec
from gradflow.samplers import ode_euler
from gradflow.schedules import CoolingSchedule, beta_at

SMALL = dict(arch=(3, 16, 16, 2), batch_size=64, pool_size=320, n_eval=200, path_len_samples=16,
             path_len_steps=20, pretrain_epochs=4, epochs=6, eval_every=2)


def same_rows(a, b):
    return len(a) == len(b) and all(x == pytest.approx(y, nan_ok=True) for x, y in zip(a, b))


def small(**kw):
    return mean_shift_config(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def base_ckpt(tmp_path_factory):
    root = tmp_path_factory.mktemp("base")
    return pretrain(small(), root / "pre").checkpoint_path


def test_config_round_trip_and_hash(tmp_path):
    cfg = small(objective=ObjectiveSpec("gft", 0.0, 1.0), schedule=CoolingSchedule("linear", 3, 1))
    doc = json.loads(json.dumps(cfg.to_dict()))
    assert RunConfig.from_dict(doc) == cfg
    assert replace(cfg, output_dir="elsewhere").config_hash() == cfg.config_hash()
    assert replace(cfg, seed=1).config_hash() != cfg.config_hash()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    assert RunConfig.load(path) == cfg


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("source"),
    lambda d: d.update(coupling="greedy"),
    lambda d: d.update(finetune_mode="prefix"),
    lambda d: d.update(arch=[5, 8, 2]),
    lambda d: d.update(typo_key=1),
    lambda d: d.update(pool_size=10),
])
def test_bad_configs_raise_config_error(mutate):
    d = small().to_dict()
    mutate(d)
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)


def test_unreadable_config(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_zero_step_pretrain_is_initialisation(tmp_path):
    cfg = small(pretrain_epochs=0)
    rec = pretrain(cfg, tmp_path)
    model, adapter, meta = load_checkpoint(rec.checkpoint_path)
    assert np.array_equal(model.theta, mlp_init(cfg.arch, cfg.activation, seed=(cfg.seed, 0)).theta)
    assert adapter is None and meta["step"] == 0 and meta["config_hash"] == cfg.config_hash()
    assert [r["epoch"] for r in rec.rows] == [0]


def test_pretrain_deterministic(tmp_path):
    a = pretrain(small(), tmp_path / "a")
    b = pretrain(small(), tmp_path / "b")
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.config_hash == b.config_hash


def test_eval_cadence_emits_final_partial(tmp_path):
    rec = pretrain(small(pretrain_epochs=5, eval_every=2), tmp_path)
    assert [r["epoch"] for r in rec.rows] == [0, 2, 4, 5]
    assert [r["step"] for r in rec.rows] == [0, 8, 16, 20]


def test_metrics_csv_schema(tmp_path):
    rec = pretrain(small(), tmp_path)
    with open(rec.metrics_path) as fh:
        assert tuple(next(csv.reader(fh))) == METRIC_COLUMNS
    assert same_rows(read_metrics(rec.metrics_path), rec.rows)
    assert (tmp_path / "timing.csv").exists()
    assert json.loads((tmp_path / "config.json").read_text()) == small().to_dict()


def test_finetune_logs_beta_from_schedule(tmp_path, base_ckpt):
    cfg = small(objective=ObjectiveSpec("gft"), schedule=CoolingSchedule("inverse_sigmoid", 10, 0.5))
    rec = finetune(cfg, base_ckpt, tmp_path)
    sched = run_schedule(cfg)
    assert sched.total_steps == cfg.epochs * cfg.steps_per_epoch
    for r in rec.rows:
        assert r["beta"] == beta_at(sched, r["step"])
    assert rec.meta["beta_mapping"] == "per_optimizer_step"


def test_gft_beta_zero_trace_equals_cfm(tmp_path, base_ckpt):
    cfm = finetune(small(), base_ckpt, tmp_path / "cfm")
    gft = finetune(small(objective=ObjectiveSpec("gft"), schedule=CoolingSchedule("constant", 0.0, 0.0)),
                   base_ckpt, tmp_path / "gft")
    assert [r["loss"] for r in cfm.rows[1:]] == [r["loss"] for r in gft.rows[1:]]
    assert [r["fd"] for r in cfm.rows] == [r["fd"] for r in gft.rows]


def test_high_beta_freezes_model(tmp_path, base_ckpt):
    cfg = small(objective=ObjectiveSpec("gft"), schedule=CoolingSchedule("constant", 1e6, 1e6))
    rec = finetune(cfg, base_ckpt, tmp_path)
    base = ex.load_base(base_ckpt)
    tuned, _, _ = load_checkpoint(rec.checkpoint_path)
    x0 = dist.sample(cfg.source, 1000, 5)
    pre_samples = dist.sample(cfg.pretrain_target, 1000, 6)
    fd_start = frechet_gaussian_distance(ode_euler(as_field(base), x0, 50).states[-1], pre_samples)
    fd_end = frechet_gaussian_distance(ode_euler(as_field(tuned), x0, 50).states[-1], pre_samples)
    assert fd_end <= 2 * fd_start + 1e-3
    assert rec.final("fd") == pytest.approx(rec.rows[0]["fd"], rel=0.5)


def test_lora_finetune_records_layers(tmp_path, base_ckpt):
    rec = finetune(small(finetune_mode="lora", lora_rank=2), base_ckpt, tmp_path)
    model, adapter, meta = load_checkpoint(rec.checkpoint_path)
    assert adapter is not None and adapter.rank == 2
    assert meta["lora_layers"] == [0, 1, 2]
    base = ex.load_base(base_ckpt)
    assert np.array_equal(model.theta, base.theta)


def test_arch_mismatch_rejected(tmp_path, base_ckpt):
    with pytest.raises(ConfigError):
        finetune(small(arch=(3, 8, 2)), base_ckpt, tmp_path)


def test_gft_without_base_model_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        ex._train(small(), 1, small().pretrain_target, mlp_init((3, 16, 16, 2)), 1, ObjectiveSpec("gft"),
                  None, None)


def test_divergence_aborts_with_last_good_checkpoint(tmp_path, base_ckpt):
    cfg = small(optimizer=AdamHyper(lr=1e300))
    with pytest.raises(RunFailed):
        finetune(cfg, base_ckpt, tmp_path)
    model, _, meta = load_checkpoint(tmp_path / "checkpoint.json")
    assert np.all(np.isfinite(model.theta))
    assert meta["step"] >= 0


def test_sweep_single_value_and_summary(tmp_path, base_ckpt):
    cfg = small(objective=ObjectiveSpec("gft"), schedule=CoolingSchedule())
    recs, summary = run_sweep(cfg, [0.0], base_ckpt, tmp_path)
    assert len(recs) == 1 and len(summary) == 1
    direct = finetune(replace(cfg, schedule=CoolingSchedule(beta_min=0.0)), base_ckpt, tmp_path / "direct")
    assert same_rows(recs[0].rows, direct.rows)
    assert (tmp_path / "sweep_summary.csv").exists()


def test_sweep_validation(tmp_path, base_ckpt):
    with pytest.raises(ConfigError):
        run_sweep(small(objective=ObjectiveSpec("gft"), schedule=CoolingSchedule()), [1, 0], base_ckpt, tmp_path)
    with pytest.raises(ConfigError):
        run_sweep(small(), [0], base_ckpt, tmp_path)


def test_sweep_aggregates_failures(tmp_path, base_ckpt, monkeypatch):
    real = ex.finetune

    def flaky(cfg, ckpt, run_dir=None, name=None):
        if cfg.schedule.beta_min == 1.0:
            raise RunFailed("boom")
        return real(cfg, ckpt, run_dir, name)

    monkeypatch.setattr(ex, "finetune", flaky)
    cfg = small(objective=ObjectiveSpec("gft"), schedule=CoolingSchedule())
    recs, summary = run_sweep(cfg, [0.0, 1.0, 2.0], base_ckpt, tmp_path)
    assert len(summary) == 3 and len(recs) == 2
    assert summary[1]["error"].startswith("RunFailed") and not summary[0]["error"]
    assert np.isnan(summary[1]["final_fd"])


def test_parallel_sweep_matches_serial(tmp_path, base_ckpt, monkeypatch):
    cfg = small(objective=ObjectiveSpec("gft"), schedule=CoolingSchedule(), epochs=2, eval_every=1)
    serial, _ = run_sweep(cfg, [0.0, 2.0], base_ckpt, tmp_path / "s")
    monkeypatch.setenv("GRADFLOW_THREADS", "2")
    parallel, _ = run_sweep(cfg, [0.0, 2.0], base_ckpt, tmp_path / "p")
    assert all(open(a.metrics_path, "rb").read() == open(b.metrics_path, "rb").read()
               for a, b in zip(serial, parallel))
    assert len(serial) == len(parallel) == 2


def test_report_outputs(tmp_path, base_ckpt):
    cfg = small(epochs=12, eval_every=1)
    rec = finetune(cfg, base_ckpt, tmp_path / "run")
    paths = emit_report([rec], tmp_path / "rep")
    assert len(paths["charts"]) == 2
    for chart in paths["charts"]:
        assert open(chart).read().startswith("<svg")
    stab = read_stability(paths["stability"])
    assert len(stab) == 1
    mem = paths["stability_rows"][0]
    for key in ("inst_variance", "convergence_rate", "spearman_rho"):
        assert stab[0][key] == mem[key]
    with open(paths["merged"]) as fh:
        assert tuple(next(csv.reader(fh))) == MERGED_COLUMNS
    # recomputing from the CSV gives the same table
    rows = read_metrics(paths["runs"][0])
    again = emit_report([RunRecord(rec.name, rec.config_hash, "", "", rows, 0.0)], tmp_path / "rep2")
    assert again["stability_rows"] == paths["stability_rows"]


def test_report_rejects_mixed_cadence(tmp_path, base_ckpt):
    a = finetune(small(eval_every=2), base_ckpt, tmp_path / "a")
    b = finetune(small(eval_every=3), base_ckpt, tmp_path / "b")
    with pytest.raises(ValueError):
        emit_report([a, b], tmp_path / "rep")
    with pytest.raises(ValueError):
        emit_report([], tmp_path / "rep")


def test_record_round_trip(tmp_path, base_ckpt):
    rec = finetune(small(), base_ckpt, tmp_path)
    loaded = RunRecord.load(tmp_path)
    assert same_rows(loaded.rows, rec.rows)
    assert loaded.name == tmp_path.name


def test_pretrain_mean_shift_converges(tmp_path):
    # N(0, I) -> N((4, 0), I): 3000 optimiser steps
    cfg = RunConfig(
        source=dist.gaussian([0.0, 0.0], [1.0, 1.0]),
        pretrain_target=dist.gaussian([4.0, 0.0], [1.0, 1.0]),
        finetune_target=dist.gaussian([4.0, 0.0], [1.0, 1.0]),
        batch_size=128, pool_size=1280, pretrain_epochs=375, eval_every=125,
    )
    rec = pretrain(cfg, tmp_path)
    assert rec.rows[-1]["step"] == 3000
    assert rec.final("fd") < 0.05
