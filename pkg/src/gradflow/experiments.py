"""Config-driven pretrain -> fine-tune runs with metric logging.

An "epoch" is one pass over a fixed training pool drawn from the target
law; 20% of that pool is held out and only used for the Frechet distance.
Beta is advanced per optimiser step, and the logged value is
``beta_at(schedule, step)`` at the step count of the evaluation.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import distributions as dist
from .coupling import couple
from .distributions import DistributionSpec, ShiftSpec, make_shift_pair
from .metrics import MetricsSeries, frechet_gaussian_distance, girsanov_kl_mc, stability_summary
from .model import (
    AdamHyper,
    AdamState,
    MlpParams,
    NonFiniteError,
    adam_step,
    as_field,
    load_checkpoint,
    lora_wrap,
    merge_lora,
    mlp_init,
    save_checkpoint,
)
from .objectives import ObjectiveSpec, cfm_loss_and_grad, gft_loss_and_grad
from .rng import GENERATOR, make_rng
from .samplers import NonFiniteStateError, ode_euler, path_length, sde_euler_maruyama
from .schedules import CoolingSchedule, beta_at, sweep_schedules

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "step", "fd", "path_len_mean", "path_len_std", "beta", "loss", "kl_to_base")
MERGED_COLUMNS = ("run",) + METRIC_COLUMNS
STABILITY_COLUMNS = ("run", "inst_variance", "convergence_rate", "spearman_rho")

_PRETRAIN, _FINETUNE = 1, 2


class ConfigError(ValueError):
    pass


class RunFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    source: DistributionSpec
    pretrain_target: DistributionSpec
    finetune_target: DistributionSpec
    objective: ObjectiveSpec = ObjectiveSpec()
    # total_steps is overwritten with the fine-tuning step count at run time
    schedule: CoolingSchedule | None = None
    coupling: str = "ot"
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 200
    arch: tuple = (3, 64, 64, 2)
    activation: str = "silu"
    optimizer: AdamHyper = AdamHyper()
    pretrain_epochs: int = 200
    epochs: int = 200
    eval_every: int = 50
    batch_size: int = 256
    pool_size: int = 4096
    holdout_frac: float = 0.2
    n_eval: int = 1000
    path_len_steps: int = 100
    path_len_samples: int = 64
    kl_samples: int = 0
    seed: int = 0
    output_dir: str = "runs/default"
    finetune_mode: str = "full"
    lora_rank: int = 4
    lora_scale: float = 1.0

    def __post_init__(self):
        if self.coupling not in ("independent", "ot", "sinkhorn"):
            raise ConfigError(f"unknown coupling {self.coupling!r}")
        if self.finetune_mode not in ("full", "lora"):
            raise ConfigError(f"unknown finetune_mode {self.finetune_mode!r}")
        if self.arch[0] != self.source.dim + 1 or self.arch[-1] != self.source.dim:
            raise ConfigError("arch must map dim+1 inputs to dim outputs")
        for spec in (self.pretrain_target, self.finetune_target):
            if spec.dim != self.source.dim:
                raise ConfigError("source and targets must share a dimension")
        if self.eval_every < 1 or self.batch_size < 1 or self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("eval_every/batch_size must be positive and epochs nonnegative")
        if not 0.0 < self.holdout_frac < 1.0:
            raise ConfigError("holdout_frac must lie in (0, 1)")
        n_train = self.pool_size - int(round(self.holdout_frac * self.pool_size))
        if n_train < self.batch_size:
            raise ConfigError("training pool smaller than one batch")

    # -- serialisation --

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif isinstance(v, AdamHyper):
                v = dataclasses.asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            d = dict(d)
            for key in ("source", "pretrain_target", "finetune_target"):
                d[key] = DistributionSpec.from_dict(d[key])
            if "objective" in d:
                d["objective"] = ObjectiveSpec.from_dict(d["objective"])
            if d.get("schedule") is not None:
                d["schedule"] = CoolingSchedule.from_dict(d["schedule"])
            if "optimizer" in d:
                d["optimizer"] = AdamHyper(**d["optimizer"])
            if "arch" in d:
                d["arch"] = tuple(int(a) for a in d["arch"])
            known = {f.name for f in dataclasses.fields(cls)}
            unknown = set(d) - known
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            return cls(**d)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- derived --

    @property
    def n_holdout(self) -> int:
        return int(round(self.holdout_frac * self.pool_size))

    @property
    def steps_per_epoch(self) -> int:
        return (self.pool_size - self.n_holdout) // self.batch_size


@dataclass
class RunRecord:
    name: str
    config_hash: str
    checkpoint_path: str
    metrics_path: str
    rows: list[dict]
    wall_seconds: float
    meta: dict = field(default_factory=dict)

    def series(self, column: str = "fd") -> MetricsSeries:
        return MetricsSeries.of([r["epoch"] for r in self.rows], [r[column] for r in self.rows])

    def final(self, column: str) -> float:
        return self.rows[-1][column]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        return cls.from_dict(json.loads((Path(run_dir) / "record.json").read_text()))


# -- scenario templates -----------------------------------------------------

def cross_domain_config(**overrides) -> RunConfig:
    """Large shift: N(0, I) pretrained to an 8-Gaussian ring, then two-moons far away."""
    base = dict(
        source=dist.gaussian([0.0, 0.0], [1.0, 1.0]),
        pretrain_target=dist.eight_gaussians(radius=2.0, var=0.02),
        finetune_target=dist.two_moons(noise=0.05, scale=1.0, offset=(4.0, 0.0)),
        objective=ObjectiveSpec("gft"),
        schedule=CoolingSchedule("inverse_sigmoid", beta_max=10.0, beta_min=0.0),
    )
    base.update(overrides)
    return RunConfig(**base)


def in_domain_config(**overrides) -> RunConfig:
    """Small shift: two-moons to a slightly rotated and translated copy."""
    moons = dist.two_moons(noise=0.05, scale=1.0, offset=(4.0, 0.0))
    _, shifted = make_shift_pair(moons, ShiftSpec(translation=(0.3, 0.2), rotation=0.2))
    base = dict(
        source=dist.gaussian([0.0, 0.0], [1.0, 1.0]),
        pretrain_target=moons,
        finetune_target=shifted,
        objective=ObjectiveSpec("gft"),
        schedule=CoolingSchedule("inverse_sigmoid", beta_max=10.0, beta_min=0.0),
    )
    base.update(overrides)
    return RunConfig(**base)


def mean_shift_config(**overrides) -> RunConfig:
    """Gaussian to Gaussian, fine-tuned to a translated Gaussian."""
    base = dict(
        source=dist.gaussian([0.0, 0.0], [1.0, 1.0]),
        pretrain_target=dist.gaussian([4.0, 0.0], [1.0, 1.0]),
        finetune_target=dist.gaussian([4.0, 1.0], [1.0, 1.0]),
        objective=ObjectiveSpec("cfm"),
    )
    base.update(overrides)
    return RunConfig(**base)


# -- training loop ----------------------------------------------------------

@dataclass
class _EvalContext:
    x0_eval: np.ndarray
    x0_path: np.ndarray
    holdout: np.ndarray
    base_field: object
    kl_x0: np.ndarray | None


def _pools(cfg: RunConfig, target: DistributionSpec, tag: int):
    pool = dist.sample(target, cfg.pool_size, (cfg.seed, tag, 0))
    perm = make_rng((cfg.seed, tag, 1)).permutation(cfg.pool_size)
    holdout = pool[perm[: cfg.n_holdout]]
    train = pool[perm[cfg.n_holdout:]]
    return train, holdout


def _evaluate(cfg, ctx: _EvalContext, model, adapter, epoch, step, beta, loss):
    field_fn = as_field(model, adapter)
    samples = ode_euler(field_fn, ctx.x0_eval, cfg.path_len_steps).states[-1]
    fd = frechet_gaussian_distance(samples, ctx.holdout)
    pl_mean, pl_std = path_length(field_fn, ctx.x0_path, cfg.path_len_steps)
    kl = float("nan")
    if ctx.kl_x0 is not None and ctx.base_field is not None:
        traj = sde_euler_maruyama(field_fn, 1.0, ctx.kl_x0, cfg.path_len_steps, seed=(cfg.seed, 7))
        kl = girsanov_kl_mc(field_fn, ctx.base_field, 1.0, traj)
    return {
        "epoch": epoch,
        "step": step,
        "fd": fd,
        "path_len_mean": pl_mean,
        "path_len_std": pl_std,
        "beta": beta,
        "loss": loss,
        "kl_to_base": kl,
    }


def _train(cfg: RunConfig, tag: int, target, model: MlpParams, n_epochs: int, objective: ObjectiveSpec,
           schedule: CoolingSchedule | None, base: MlpParams | None, adapter=None, on_checkpoint=None):
    train, holdout = _pools(cfg, target, tag)
    ctx = _EvalContext(
        x0_eval=dist.sample(cfg.source, cfg.n_eval, (cfg.seed, tag, 2)),
        x0_path=dist.sample(cfg.source, cfg.path_len_samples, (cfg.seed, tag, 3)),
        holdout=holdout,
        base_field=None if base is None else as_field(base),
        kl_x0=dist.sample(cfg.source, cfg.kl_samples, (cfg.seed, tag, 4)) if cfg.kl_samples > 0 else None,
    )
    use_gft = objective.kind == "gft"
    if use_gft and base is None:
        raise ConfigError("gft objective needs a frozen base model")

    def beta_now(step):
        if not use_gft:
            return 0.0
        return beta_at(schedule, step) if schedule is not None else objective.beta

    params = model.theta if adapter is None else adapter.flat()
    opt = AdamState.zeros(params.size)
    n_base = model.theta.size
    step = 0
    rows, timings, losses = [], [], []
    t_start = time.perf_counter()
    rows.append(_evaluate(cfg, ctx, model, adapter, 0, 0, beta_now(0), float("nan")))
    timings.append((0, 0.0))
    for epoch in range(1, n_epochs + 1):
        perm = make_rng((cfg.seed, tag, 5, epoch)).permutation(train.shape[0])
        for b in range(cfg.steps_per_epoch):
            x1 = train[perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            x0 = dist.sample(cfg.source, cfg.batch_size, (cfg.seed, tag, 6, step))
            batch = couple(cfg.coupling, x0, x1, seed=(cfg.seed, tag, 8, step),
                           epsilon=cfg.sinkhorn_epsilon, iters=cfg.sinkhorn_iters)
            loss_seed = (cfg.seed, tag, 9, step)
            try:
                if use_gft:
                    loss, grad = gft_loss_and_grad(model, base, batch, beta_now(step), loss_seed,
                                                   objective.sigma, adapter)
                else:
                    loss, grad = cfm_loss_and_grad(model, batch, loss_seed, objective.sigma, adapter)
                if adapter is None:
                    new_params, new_opt = adam_step(params, grad, opt, cfg.optimizer)
                    new_model, new_adapter = model.with_theta(new_params), None
                else:
                    new_params, new_opt = adam_step(params, grad[n_base:], opt, cfg.optimizer)
                    new_model, new_adapter = model, adapter.with_flat(new_params)
                    if not np.all(np.isfinite(new_params)):
                        raise NonFiniteError("non-finite adapter parameters")
            except NonFiniteError as exc:
                if on_checkpoint:
                    on_checkpoint(model, adapter, step)
                raise RunFailed(f"non-finite value at step {step}: {exc}") from exc
            params, opt, model, adapter = new_params, new_opt, new_model, new_adapter
            losses.append(loss)
            step += 1
        if epoch % cfg.eval_every == 0 or epoch == n_epochs:
            try:
                row = _evaluate(cfg, ctx, model, adapter, epoch, step, beta_now(step),
                                float(np.mean(losses)) if losses else float("nan"))
            except (NonFiniteStateError, NonFiniteError) as exc:
                if on_checkpoint:
                    on_checkpoint(model, adapter, step)
                raise RunFailed(f"evaluation failed at epoch {epoch}: {exc}") from exc
            rows.append(row)
            timings.append((epoch, 1000.0 * (time.perf_counter() - t_start)))
            losses = []
    return model, adapter, rows, timings, step


def _write_metrics(path: Path, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_metrics(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        out = []
        for r in csv.DictReader(fh):
            out.append({k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in r.items() if k in METRIC_COLUMNS})
        return out


def _write_timing(path: Path, timings):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "wall_ms"])
        for epoch, ms in timings:
            w.writerow([epoch, f"{ms:.1f}"])


def _finish(run_dir: Path, name, cfg, model, adapter, rows, timings, step, wall, meta) -> RunRecord:
    ckpt = save_checkpoint(run_dir / "checkpoint.json", model, adapter,
                           {"step": step, "seed": cfg.seed, "config_hash": cfg.config_hash(), **meta})
    metrics = run_dir / "metrics.csv"
    _write_metrics(metrics, rows)
    _write_timing(run_dir / "timing.csv", timings)
    record = RunRecord(name, cfg.config_hash(), str(ckpt), str(metrics), rows, wall, meta)
    (run_dir / "record.json").write_text(json.dumps(record.to_dict(), sort_keys=True, indent=1))
    return record


def _prepare_dir(cfg: RunConfig, run_dir) -> Path:
    run_dir = Path(run_dir if run_dir is not None else cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
    return run_dir


def _base_meta(cfg: RunConfig) -> dict:
    return {
        "rng": GENERATOR,
        "coupling": cfg.coupling,
        # exact OT uses the assignment itself; sinkhorn draws one partner per source row
        "coupling_sampling": {"ot": "assignment", "sinkhorn": "conditional_draw",
                              "independent": "shuffled_pairing"}[cfg.coupling],
        "steps_per_epoch": cfg.steps_per_epoch,
        "beta_mapping": "per_optimizer_step",
        "objective_sigma": cfg.objective.sigma,
    }


def pretrain(cfg: RunConfig, run_dir=None) -> RunRecord:
    """Train from initialisation on (source, pretrain_target) with CFM."""
    run_dir = _prepare_dir(cfg, run_dir)
    model = mlp_init(cfg.arch, cfg.activation, seed=(cfg.seed, 0))
    meta = {**_base_meta(cfg), "phase": "pretrain"}
    t0 = time.perf_counter()

    def save_last(m, a, step):
        save_checkpoint(run_dir / "checkpoint.json", m, a, {"step": step, "seed": cfg.seed,
                                                             "config_hash": cfg.config_hash(), **meta})

    model, _, rows, timings, step = _train(cfg, _PRETRAIN, cfg.pretrain_target, model, cfg.pretrain_epochs,
                                           ObjectiveSpec("cfm", sigma=cfg.objective.sigma), None, None,
                                           on_checkpoint=save_last)
    return _finish(run_dir, "pretrain", cfg, model, None, rows, timings, step,
                   time.perf_counter() - t0, meta)


def load_base(path) -> MlpParams:
    model, adapter, _ = load_checkpoint(path)
    return model if adapter is None else merge_lora(model, adapter)


def run_schedule(cfg: RunConfig) -> CoolingSchedule | None:
    total = max(cfg.epochs * cfg.steps_per_epoch, 1)
    if cfg.schedule is None:
        return None
    return replace(cfg.schedule, total_steps=total)


def finetune(cfg: RunConfig, base_checkpoint, run_dir=None, name: str | None = None) -> RunRecord:
    """Fine-tune a checkpoint on finetune_target with CFM or GFT, full or LoRA.

    The record is named after the run directory unless ``name`` is given.
    """
    base = load_base(base_checkpoint)
    if base.arch != tuple(cfg.arch) or base.activation != cfg.activation:
        raise ConfigError("base checkpoint architecture does not match the config")
    run_dir = _prepare_dir(cfg, run_dir)
    adapter = None
    if cfg.finetune_mode == "lora":
        adapter = lora_wrap(base, cfg.lora_rank, seed=(cfg.seed, 11), scale=cfg.lora_scale)
    schedule = run_schedule(cfg)
    meta = {**_base_meta(cfg), "phase": "finetune", "objective": cfg.objective.kind,
            "finetune_mode": cfg.finetune_mode,
            "schedule": None if schedule is None else schedule.to_dict(),
            "lora_layers": None if adapter is None else list(adapter.layers)}
    t0 = time.perf_counter()

    def save_last(m, a, step):
        save_checkpoint(run_dir / "checkpoint.json", m, a, {"step": step, "seed": cfg.seed,
                                                             "config_hash": cfg.config_hash(), **meta})

    model, adapter, rows, timings, step = _train(cfg, _FINETUNE, cfg.finetune_target, base, cfg.epochs,
                                                 cfg.objective, schedule, base, adapter, on_checkpoint=save_last)
    return _finish(run_dir, name or run_dir.name, cfg, model, adapter, rows, timings, step,
                   time.perf_counter() - t0, meta)


# -- sweeps -----------------------------------------------------------------

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("GRADFLOW_THREADS", "1")))
    except ValueError:
        return 1


def _sweep_member(args):
    cfg, base_checkpoint, run_dir, name = args
    try:
        return finetune(cfg, base_checkpoint, run_dir, name), None
    except Exception as exc:  # noqa: BLE001 - collected into the summary
        return None, f"{type(exc).__name__}: {exc}"


def run_sweep(base_cfg: RunConfig, beta_min_list, base_checkpoint=None, run_dir=None):
    """Fine-tune once per beta_min; returns (records, summary rows).

    Failed members show up in the summary with an ``error`` entry and do not
    stop the sweep. ``GRADFLOW_THREADS`` > 1 runs members in processes.
    """
    values = [float(b) for b in beta_min_list]
    if values != sorted(values):
        raise ConfigError("beta_min list must be sorted ascending")
    if base_cfg.schedule is None or base_cfg.objective.kind != "gft":
        raise ConfigError("a sweep needs a gft objective with a cooling schedule")
    root = Path(run_dir if run_dir is not None else base_cfg.output_dir)
    if base_checkpoint is None:
        base_checkpoint = pretrain(base_cfg, root / "pretrain").checkpoint_path
    jobs = []
    for sched in sweep_schedules(base_cfg.schedule, values):
        name = f"beta_min={sched.beta_min:g}"
        cfg = replace(base_cfg, schedule=sched, output_dir=str(root / name))
        jobs.append((cfg, base_checkpoint, root / name, name))
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_member, jobs))
    else:
        results = [_sweep_member(j) for j in jobs]
    records, summary = [], []
    for (cfg, _, _, name), (rec, err) in zip(jobs, results):
        row = {"run": name, "beta_min": cfg.schedule.beta_min}
        if rec is None:
            row.update({"final_fd": float("nan"), "final_path_len": float("nan"), "error": err})
        else:
            records.append(rec)
            row.update({"final_fd": rec.final("fd"), "final_path_len": rec.final("path_len_mean"), "error": ""})
        summary.append(row)
    with (root / "sweep_summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, ["run", "beta_min", "final_fd", "final_path_len", "error"], lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    return records, summary


# -- reporting --------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def line_chart_svg(series: dict, title: str, xlabel: str, ylabel: str, width: int = 640, height: int = 400) -> str:
    """Minimal SVG line chart. ``series`` maps name -> (x, y[, lo, hi]); lo/hi draw a band."""
    left, right, top, bottom = 60, 150, 30, 45
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()])
    ys = np.concatenate([np.concatenate([np.asarray(a, float) for a in s[1:]]) for s in series.values()])
    ys = ys[np.isfinite(ys)]
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return top + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for k in range(5):
        xv = x_lo + k * (x_hi - x_lo) / 4
        yv = y_lo + k * (y_hi - y_lo) / 4
        out.append(f'<line x1="{px(xv):.1f}" y1="{top + ph}" x2="{px(xv):.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<line x1="{left - 4}" y1="{py(yv):.1f}" x2="{left}" y2="{py(yv):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.4g}</text>')
    out.append(f'<text x="{left + pw / 2:.0f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.0f}" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2:.0f})">{ylabel}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        x = np.asarray(s[0], float)
        y = np.asarray(s[1], float)
        if len(s) == 4:
            lo, hi = np.asarray(s[2], float), np.asarray(s[3], float)
            pts = [f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, hi)] + [
                f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x[::-1], lo[::-1])]
            out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y) if np.isfinite(b))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 * i + 8
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def stability_table(records, window: int = 10) -> list[dict]:
    table = []
    for rec in records:
        series = rec.series("fd")
        if len(series) < max(window, 3):
            stats = {k: float("nan") for k in STABILITY_COLUMNS[1:]}
        else:
            stats = stability_summary(series, window)
        table.append({"run": rec.name, **stats})
    return table


def emit_report(records, out_dir, window: int = 10) -> dict:
    """Write per-run and merged CSVs, FD / path-length SVG charts and a stability table.

    merged.csv columns: run, epoch, step, fd, path_len_mean, path_len_std,
    beta, loss, kl_to_base. stability.csv columns: run, inst_variance,
    convergence_rate, spearman_rho.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    cadence = [r["epoch"] for r in records[0].rows]
    for rec in records[1:]:
        if [r["epoch"] for r in rec.rows] != cadence:
            raise ValueError("records do not share an eval cadence")
    names = [rec.name for rec in records]
    if len(set(names)) != len(names):
        # keep rows distinguishable in the merged CSV
        records = [replace(rec, name=f"{rec.name}#{i}") for i, rec in enumerate(records)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"runs": []}
    for rec in records:
        p = out / f"{_safe(rec.name)}_metrics.csv"
        _write_metrics(p, rec.rows)
        paths["runs"].append(str(p))
    merged = out / "merged.csv"
    with merged.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MERGED_COLUMNS)
        for rec in records:
            for r in rec.rows:
                w.writerow([rec.name] + [_fmt(r[c]) for c in METRIC_COLUMNS])
    paths["merged"] = str(merged)
    fd_series = {rec.name: ([r["epoch"] for r in rec.rows], [r["fd"] for r in rec.rows]) for rec in records}
    pl_series = {}
    for rec in records:
        e = [r["epoch"] for r in rec.rows]
        m = np.array([r["path_len_mean"] for r in rec.rows])
        s = np.array([r["path_len_std"] for r in rec.rows])
        pl_series[rec.name] = (e, m, m - s, m + s)
    (out / "fd.svg").write_text(line_chart_svg(fd_series, "Frechet distance", "epoch", "FD"))
    (out / "path_length.svg").write_text(
        line_chart_svg(pl_series, "Average path length (+/- 1 std)", "epoch", "path length"))
    paths["charts"] = [str(out / "fd.svg"), str(out / "path_length.svg")]
    table = stability_table(records, window)
    stab = out / "stability.csv"
    with stab.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STABILITY_COLUMNS)
        for row in table:
            w.writerow([row["run"]] + [_fmt(row[c]) for c in STABILITY_COLUMNS[1:]])
    paths["stability"] = str(stab)
    paths["stability_rows"] = table
    return paths


def read_stability(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{k: (v if k == "run" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in name)
