"""Training and evaluation loops."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from nriuq import calibration as cal
from nriuq.autodiff import Adam, load_checkpoint, lr_schedule, no_grad, save_checkpoint
from nriuq.config import ExperimentConfig
from nriuq.dynamics import Dataset
from nriuq.errorprofile import (
    PriorSchedule,
    build_prior_schedule,
    computational_error,
    delta_x0,
    physical_error,
)
from nriuq.losses import LossConfig, total_loss
from nriuq.model import FNRI, ModelConfig, edge_labels

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.nrck"
RUNLOG_NAME = "runlog.jsonl"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, checkpoint: Path | None):
        self.epoch = epoch
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at epoch {epoch}; last good checkpoint: {checkpoint}")


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, record: dict) -> None:
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records], dtype=np.float64)

    @classmethod
    def read(cls, path: str | Path) -> "RunLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def sigma_stats(sigma: np.ndarray) -> dict:
    q25, med, q75 = np.quantile(sigma, [0.25, 0.5, 0.75])
    return {"sigma_min": float(sigma.min()), "sigma_median": float(med),
            "sigma_iqr": float(q75 - q25), "sigma_max": float(sigma.max())}


def prior_for_training(cfg: ExperimentConfig, train: Dataset) -> np.ndarray:
    """Prior widths for every decoded step, in normalized units ``(T, 4)``.

    The schedule is built in simulator units from the error grids (or read
    from ``prior_csv``) at the time elapsed since the rollout start, then
    divided by the per-coordinate normalization factors.
    """
    wd = cfg.model.decoder_window
    if cfg.prior_csv:
        sched = PriorSchedule.from_csv(cfg.prior_csv)
        sigma = sched.sigma[:wd]
        if sigma.size < wd:
            raise ValueError(f"prior schedule has {sigma.size} steps, decoder needs {wd}")
    else:
        ep = cfg.error_profile
        comp = computational_error(cfg.sim, ep.dt_grid, ep.reference_dt, ep.horizon, ep.n_runs)
        phys = physical_error(cfg.sim, ep.sigma_grid, ep.horizon, ep.n_runs)
        dt_eff = cfg.sim.effective_dt
        sched = build_prior_schedule(comp, phys, delta_x0(train), cfg.sim.dt_fine, wd,
                                     sample_dt=dt_eff, t_offset=dt_eff)
        for note in sched.clamped:
            log.info("prior schedule: %s", note)
        sigma = sched.sigma
    return sigma[:, None] / train.normalization[None, :]


def _batches(n: int, size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def _run_loss(model: FNRI, loss_cfg: LossConfig, x: np.ndarray, epoch: int, rng=None):
    out = model(x, rng)
    p = out.prediction
    lv = total_loss(loss_cfg, p.mean, p.sigma, out.target, out.logits, epoch, model.cfg.sigma0)
    return out, lv


def evaluate_split(model: FNRI, loss_cfg: LossConfig, data: Dataset, batch_size: int,
                   epoch: int = 0, teacher: bool = True) -> dict:
    """Loss components, MSE, edge accuracy and sigma stats in eval mode."""
    model.eval()
    x = data.normalized()
    labels = edge_labels(data.springs, data.charges)
    comps: dict[str, float] = {}
    logits, sigmas, sq = [], [], 0.0
    count = 0
    with no_grad():
        for idx in _batches(len(data), batch_size):
            out = model(x[idx], teacher=teacher)
            p = out.prediction
            lv = total_loss(loss_cfg, p.mean, p.sigma, out.target, out.logits, epoch, model.cfg.sigma0)
            for k, v in lv.components.items():
                comps[k] = comps.get(k, 0.0) + v
            sq += float(np.sum((p.mean.data - out.target) ** 2))
            count += out.target.size
            logits.append(out.logits.data)
            sigmas.append(p.sigma.data.ravel())
    logits = np.concatenate(logits)
    acc, per = cal.edge_accuracy_by_factor(logits, labels)
    res = {"loss": sum(comps.values()), "components": comps, "mse": sq / count,
           "edge_accuracy": acc, "edge_accuracy_factors": per.tolist()}
    res.update(sigma_stats(np.concatenate(sigmas)))
    return res


def _checkpoint_meta(cfg: ExperimentConfig, data: Dataset, epoch: int, val_loss: float) -> dict:
    loss = {k: v for k, v in asdict(cfg.loss).items() if k != "prior_sigma"}
    return {"model": cfg.model.to_dict(), "loss": loss, "epoch": epoch, "val_loss": val_loss,
            "normalization": data.normalization.tolist()}


def train(cfg: ExperimentConfig, data: dict[str, Dataset], out_dir: str | Path,
          progress: bool = False) -> RunLog:
    """Mini-batch Adam training with per-epoch validation checkpointing.

    Writes ``runlog.jsonl`` (one JSON record per epoch) and
    ``checkpoint.nrck`` (best validation loss so far) into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(path=out_dir / RUNLOG_NAME)
    runlog.path.write_text("")
    ckpt = out_dir / CHECKPOINT_NAME
    tc = cfg.train
    train_set, valid_set = data["train"], data["valid"]
    loss_cfg = cfg.loss
    if loss_cfg.kind == "aniso_gauss_kl" and loss_cfg.prior_sigma is None:
        loss_cfg = LossConfig(**{**asdict(loss_cfg), "prior_sigma": prior_for_training(cfg, train_set)})
    model = FNRI(cfg.model)
    opt = Adam(model.parameters(), lr=tc.lr0)
    rng = np.random.default_rng(tc.seed)
    x = train_set.normalized()
    best = np.inf
    saved: Path | None = None
    for epoch in range(tc.epochs):
        opt.lr = lr_schedule(epoch, tc.lr0, tc.lr_halving)
        model.train()
        comps: dict[str, float] = {}
        for idx in _batches(len(x), tc.batch_size, rng.permutation(len(x))):
            _, lv = _run_loss(model, loss_cfg, x[idx], epoch, rng)
            if not np.isfinite(lv.total.item()):
                raise TrainingDiverged(epoch, saved)
            opt.zero_grad()
            lv.total.backward()
            opt.step()
            for k, v in lv.components.items():
                comps[k] = comps.get(k, 0.0) + v
        val = evaluate_split(model, loss_cfg, valid_set, tc.batch_size, epoch)
        if not np.isfinite(val["loss"]):
            raise TrainingDiverged(epoch, saved)
        record = {"epoch": epoch, "lr": opt.lr, "train_loss": sum(comps.values()),
                  "train_components": comps, "val_loss": val["loss"],
                  "val_components": val["components"], "val_mse": val["mse"],
                  "val_edge_accuracy": val["edge_accuracy"],
                  **{k: val[k] for k in ("sigma_min", "sigma_median", "sigma_iqr", "sigma_max")}}
        if val["loss"] < best:
            best = val["loss"]
            save_checkpoint(ckpt, model.state_dict(), _checkpoint_meta(cfg, train_set, epoch, best))
            saved = ckpt
            record["checkpoint"] = True
        runlog.append(record)
        if progress:
            log.info("epoch %d  train %.4g  val %.4g  mse %.3g  acc %.1f%%", epoch,
                     record["train_loss"], val["loss"], val["mse"], val["edge_accuracy"])
    return runlog


def load_model(path: str | Path) -> tuple[FNRI, dict]:
    arrays, meta = load_checkpoint(path)
    model = FNRI(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(arrays)
    model.eval()
    return model, meta


@dataclass
class EvaluationReport:
    metrics: dict
    fit: cal.FitReport | None
    per_coordinate_fits: dict = field(default_factory=dict)
    flags: set = field(default_factory=set)
    fit_note: str = "fixed sigma"

    def to_text(self) -> str:
        lines = [f"{k}: {v}" for k, v in self.metrics.items()]
        if self.fit is None:
            lines.append(f"zscore_fit: none ({self.fit_note})")
        else:
            for f in (self.fit.gaussian, self.fit.lorentzian):
                lines.append(f"{f.family}_location: {f.location!r}")
                lines.append(f"{f.family}_scale: {f.scale!r}")
                lines.append(f"{f.family}_qof: {f.qof!r}")
                lines.append(f"{f.family}_ok: {f.ok}")
            lines.append(f"best_fit: {self.fit.best}")
        lines.append(f"pathology_flags: {','.join(sorted(self.flags)) or 'none'}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(self.to_text())
        fits = {"pooled": self.fit, **self.per_coordinate_fits} if self.fit is not None else {}
        for name, fit in fits.items():
            with open(out_dir / f"zscore_hist_{name}.csv", "w") as fh:
                fh.write("bin_left,bin_right,density,count\n")
                for i in range(len(fit.density)):
                    fh.write(f"{fit.edges[i]!r},{fit.edges[i + 1]!r},{fit.density[i]!r},{int(fit.counts[i])}\n")


def evaluate(model: FNRI, data: Dataset, batch_size: int = 128, runlog: RunLog | None = None) -> EvaluationReport:
    """Free rollouts with hard edges on ``data``; metrics, z-score fits, flags."""
    model.eval()
    cfg = model.cfg
    x = data.normalized()
    labels = edge_labels(data.springs, data.charges)
    means, targets, sigmas, logits = [], [], [], []
    with no_grad():
        for idx in _batches(len(data), batch_size):
            out = model(x[idx], teacher=False)
            means.append(out.prediction.mean.data)
            sigmas.append(out.prediction.sigma.data)
            targets.append(out.target)
            logits.append(out.logits.data)
    mean, target = np.concatenate(means), np.concatenate(targets)
    sigma, logits = np.concatenate(sigmas), np.concatenate(logits)
    acc, per = cal.edge_accuracy_by_factor(logits, labels)
    step_mse = cal.mse_by_step(mean, target)
    metrics = {"n_trajectories": len(data), "edge_accuracy": acc,
               "edge_accuracy_springs": float(per[0]), "edge_accuracy_charges": float(per[1]),
               "mse": cal.mse_metric(mean, target),
               "mse_first_step": float(step_mse[0]), "mse_last_step": float(step_mse[-1])}
    fit, per_fits, flags, note = None, {}, set(), "fixed sigma"
    if cfg.sigma_mode != "fixed":
        z = cal.z_scores(mean, target, sigma)
        metrics.update({"z_mean": z.mean, "z_std": z.std,
                        "z_abs_median": float(np.median(np.abs(z.values)))})
        metrics.update(sigma_stats(sigma))
        try:
            fit = cal.fit_distributions(z)
            per_fits = {c: cal.fit_distributions(v) for c, v in z.per_coordinate.items()}
        except ValueError as exc:
            log.warning("z-score fit skipped: %s", exc)
            note = str(exc)
        iqr = runlog.series("sigma_iqr") if runlog is not None and len(runlog.records) >= 10 else None
        if iqr is not None:
            flags = cal.detect_pathologies(iqr, cfg.sigma0, metrics["z_abs_median"], step_mse)
    return EvaluationReport(metrics, fit, per_fits, flags, note)
