"""Command-line entry point: ``gradflow {pretrain,finetune,sweep,report,verify}``.

Exit codes: 0 success, 1 run failure, 2 config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import ConfigError, RunConfig, RunFailed, RunRecord, emit_report, finetune, pretrain, run_sweep

log = logging.getLogger("gradflow")

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="train from initialisation with CFM")
    s.add_argument("config")
    s.add_argument("--out", help="run directory (default: config output_dir)")

    s = sub.add_parser("finetune", help="fine-tune a checkpoint")
    s.add_argument("config")
    s.add_argument("--base", required=True, help="base checkpoint JSON")
    s.add_argument("--out")

    s = sub.add_parser("sweep", help="fine-tune once per beta_min")
    s.add_argument("config")
    s.add_argument("--beta-mins", required=True, help="comma-separated, ascending")
    s.add_argument("--base", help="base checkpoint; pretrains first if omitted")
    s.add_argument("--out")

    s = sub.add_parser("report", help="merge run directories into CSV/SVG/stability outputs")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--out", default="report")
    s.add_argument("--window", type=int, default=10)

    s = sub.add_parser("verify", help="run the Gaussian oracle checks")
    s.add_argument("--betas", default="0,0.5,1,2,1e6")
    s.add_argument("--steps", type=int, default=5000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=0.10)
    s.add_argument("--out", help="write the JSON reports here")
    return p


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _cmd_pretrain(args):
    rec = pretrain(RunConfig.load(args.config), args.out)
    print(rec.checkpoint_path)


def _cmd_finetune(args):
    if not Path(args.base).is_file():
        raise ConfigError(f"base checkpoint {args.base} not found")
    rec = finetune(RunConfig.load(args.config), args.base, args.out)
    print(rec.metrics_path)


def _cmd_sweep(args):
    records, summary = run_sweep(RunConfig.load(args.config), _floats(args.beta_mins), args.base, args.out)
    for row in summary:
        print(f"{row['run']}\tfd={row['final_fd']:.6g}\tpath_len={row['final_path_len']:.6g}\t{row['error']}")
    if any(row["error"] for row in summary):
        raise RunFailed(f"{sum(bool(r['error']) for r in summary)} sweep member(s) failed")


def _cmd_report(args):
    records = []
    for d in args.run_dirs:
        try:
            records.append(RunRecord.load(d))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot load run {d}: {exc}") from exc
    try:
        paths = emit_report(records, args.out, args.window)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(paths["merged"])


def _cmd_verify(args):
    from .oracle import GaussianPath, run_mixture_check

    base = GaussianPath([0.0], [-2.0])
    target = GaussianPath([0.0], [2.0])
    failed = False
    reports = []
    for beta in _floats(args.betas):
        rep = run_mixture_check(base, target, beta, steps=args.steps, seed=args.seed)
        ok = rep.mean_rel_err < args.tol
        failed |= not ok
        reports.append(rep.to_dict())
        print(f"beta={beta:g}\tmean_rel_err={rep.mean_rel_err:.4f}\tsup_rel_err={rep.sup_rel_err:.4f}\t"
              f"{'PASS' if ok else 'FAIL'}")
    if args.out:
        Path(args.out).write_text(json.dumps(reports, indent=1, sort_keys=True))
    if failed:
        raise RunFailed("convex-combination check above tolerance")


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailed as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
