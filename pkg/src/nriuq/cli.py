"""Command-line entry point: ``nriuq <verb> ...``.

Every relative path is resolved against ``--run-dir`` (default: the current
directory). ``--threads`` (or ``NRIUQ_THREADS``) caps the numba worker pool.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("nriuq")

SPLITS = ("train", "valid", "test")


def _path(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(args.run_dir) / p


def _config(args):
    from nriuq.config import load_config

    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    cfg = load_config(_path(args, args.config) if args.config else None, overrides)
    if cfg.prior_csv:
        cfg.prior_csv = str(_path(args, cfg.prior_csv))
        if not Path(cfg.prior_csv).exists():
            raise FileNotFoundError(f"prior schedule {cfg.prior_csv} not found")
    return cfg


def cmd_simulate(args) -> int:
    from nriuq.dataio import write_dataset
    from nriuq.dynamics import generate_dataset

    cfg = _config(args)
    tc = cfg.train
    counts = (args.train or tc.n_train, args.valid or tc.n_valid, args.test or tc.n_test)
    seed = tc.seed if args.seed is None else args.seed
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(cfg.sim, counts, seed=seed)
    for split in SPLITS:
        write_dataset(out / f"{split}.tuld", data[split])
        log.info("wrote %d %s trajectories to %s", len(data[split]), split, out / f"{split}.tuld")
    return 0


def cmd_error_profile(args) -> int:
    from nriuq.dataio import read_dataset
    from nriuq.errorprofile import (
        ErrorGrid,
        build_prior_schedule,
        computational_error,
        delta_x0,
        physical_error,
    )

    cfg = _config(args)
    ep = cfg.error_profile
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind in ("comp", "both"):
        grid = computational_error(cfg.sim, ep.dt_grid, ep.reference_dt, ep.horizon, ep.n_runs)
        grid.to_csv(out / "comp.csv")
        log.info("late-time computational error per dt: %s", np.array2string(grid.late_time_mean()))
    if args.kind in ("phys", "both"):
        grid = physical_error(cfg.sim, ep.sigma_grid, ep.horizon, ep.n_runs)
        grid.to_csv(out / "phys.csv")
        log.info("late-time physical error per sigma: %s", np.array2string(grid.late_time_mean()))
    if args.kind == "prior":
        if not args.data:
            raise ValueError("error-profile prior needs --data (the training split sets delta_x0)")
        comp = ErrorGrid.from_csv(out / "comp.csv", "comp")
        phys = ErrorGrid.from_csv(out / "phys.csv", "phys")
        train = read_dataset(_path(args, args.data) / "train.tuld", "train")
        dt = cfg.sim.effective_dt
        sched = build_prior_schedule(comp, phys, delta_x0(train), cfg.sim.dt_fine,
                                     cfg.model.decoder_window, sample_dt=dt, t_offset=dt)
        for note in sched.clamped:
            log.warning("prior schedule: %s", note)
        sched.to_csv(out / "prior.csv")
        log.info("wrote %s (delta_x0 = %.4g)", out / "prior.csv", sched.delta_x0)
    return 0


def cmd_train(args) -> int:
    from nriuq.dataio import load_splits
    from nriuq.training import CHECKPOINT_NAME, TrainingDiverged, train

    cfg = _config(args)
    data = load_splits(_path(args, args.data))
    out = _path(args, args.out)
    try:
        runlog = train(cfg, data, out, progress=not args.quiet)
    except TrainingDiverged as exc:
        log.error("%s", exc)
        return 1
    last = runlog.records[-1]
    log.info("done: %d epochs, val loss %.6g, val mse %.4g, checkpoint %s", len(runlog.records),
             last["val_loss"], last["val_mse"], out / CHECKPOINT_NAME)
    return 0


def cmd_evaluate(args) -> int:
    from nriuq.dataio import read_dataset
    from nriuq.training import RUNLOG_NAME, RunLog, evaluate, load_model

    ckpt = _path(args, args.checkpoint)
    model, meta = load_model(ckpt)
    data = read_dataset(_path(args, args.data) / f"{args.split}.tuld", args.split)
    if data.n_particles != model.cfg.n_particles:
        raise ValueError(f"checkpoint expects {model.cfg.n_particles} particles, data has {data.n_particles}")
    runlog_path = ckpt.parent / RUNLOG_NAME
    runlog = RunLog.read(runlog_path) if runlog_path.exists() else None
    report = evaluate(model, data, args.batch_size, runlog)
    out = _path(args, args.out)
    report.write(out)
    sys.stdout.write(report.to_text())
    return 0


def cmd_report(args) -> int:
    from nriuq.training import RUNLOG_NAME, RunLog

    run = _path(args, args.run)
    runlog = RunLog.read(run / RUNLOG_NAME)
    if not runlog.records:
        raise ValueError(f"{run / RUNLOG_NAME} is empty")
    val = runlog.series("val_loss").tolist()
    mse = runlog.series("val_mse").tolist()
    acc = runlog.series("val_edge_accuracy").tolist()
    best = int(np.argmin(val))
    lines = [
        f"epochs: {len(val)}",
        f"best_epoch: {runlog.records[best]['epoch']}",
        f"val_loss_first: {val[0]!r}",
        f"val_loss_best: {val[best]!r}",
        f"val_loss_last: {val[-1]!r}",
        f"val_mse_first: {mse[0]!r}",
        f"val_mse_last: {mse[-1]!r}",
        f"val_mse_ratio: {mse[-1] / mse[0]!r}",
        f"val_edge_accuracy_last: {acc[-1]!r}",
        f"sigma_iqr_last: {runlog.records[-1]['sigma_iqr']!r}",
    ]
    text = "\n".join(lines) + "\n"
    if args.eval:
        rep = _path(args, args.eval) / "report.txt"
        text += "\n[evaluation]\n" + rep.read_text()
    (run / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nriuq", description=__doc__.splitlines()[0])
    p.add_argument("--run-dir", default=".", help="base directory for relative paths")
    p.add_argument("--threads", type=int, default=None, help="numba worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable)")
        return sp

    s = with_config(sub.add_parser("simulate", help="generate train/valid/test trajectory files"))
    s.add_argument("--out", default="data")
    s.add_argument("--train", type=int)
    s.add_argument("--valid", "--val", dest="valid", type=int)
    s.add_argument("--test", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = with_config(sub.add_parser("error-profile", help="computational/physical error grids and prior schedule"))
    s.add_argument("kind", choices=("comp", "phys", "both", "prior"), nargs="?", default="both")
    s.add_argument("--out", default="profiles")
    s.add_argument("--data", help="dataset directory (for 'prior')")
    s.set_defaults(func=cmd_error_profile)

    s = with_config(sub.add_parser("train", help="train a model and checkpoint on validation loss"))
    s.add_argument("--data", default="data")
    s.add_argument("--out", default="run")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="free-rollout metrics, z-score fits and pathology flags")
    s.add_argument("--checkpoint", default="run/checkpoint.nrck")
    s.add_argument("--data", default="data")
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--out", default="eval")
    s.add_argument("--batch-size", type=int, default=128)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="summarise a training run")
    s.add_argument("--run", default="run")
    s.add_argument("--eval", help="evaluation directory to append")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("numba").setLevel(logging.WARNING)
    if args.threads is not None:
        from nriuq.kernels import set_threads

        set_threads(args.threads)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
