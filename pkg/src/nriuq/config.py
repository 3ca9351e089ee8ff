"""Experiment configuration from INI-style ``key = value`` files.

Sections: ``[simulator]``, ``[model]``, ``[loss]``, ``[training]`` and
``[error_profile]``. Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from nriuq.dynamics import SimConfig
from nriuq.errorprofile import DEFAULT_DT_GRID, DEFAULT_SIGMA_GRID
from nriuq.losses import LossConfig
from nriuq.model import ModelConfig


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    lr0: float = 5e-4
    lr_halving: int = 200
    seed: int = 0
    n_train: int = 1000
    n_valid: int = 200
    n_test: int = 200
    checkpoint_metric: str = "val_loss"


@dataclass
class ErrorProfileConfig:
    dt_grid: tuple = DEFAULT_DT_GRID
    sigma_grid: tuple = DEFAULT_SIGMA_GRID
    reference_dt: float | None = None
    horizon: int = 100
    n_runs: int = 50


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    error_profile: ErrorProfileConfig = field(default_factory=ErrorProfileConfig)
    prior_csv: str | None = None

    def __post_init__(self):
        self.loss.check_sigma_mode(self.model.sigma_mode)
        if self.model.n_particles != self.sim.n_particles:
            raise ValueError("model and simulator disagree on the number of particles")
        need = self.model.encoder_window + self.model.decoder_window
        if self.sim.n_sampled_steps < need:
            raise ValueError(f"trajectories have {self.sim.n_sampled_steps} steps, model needs {need}")


def _coerce(cls, section: dict, name: str):
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, raw in section.items():
        if key not in types:
            raise KeyError(f"[{name}] unknown key {key!r}")
        t = str(types[key])
        if t == "bool":
            out[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        elif t == "int":
            out[key] = int(raw)
        elif t == "float" or t.startswith("float"):
            out[key] = None if raw.strip().lower() == "none" else float(raw)
        elif t == "tuple":
            out[key] = tuple(float(v) for v in raw.replace(",", " ").split())
        else:
            out[key] = None if raw.strip().lower() == "none" else raw.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an experiment config; missing sections fall back to defaults.

    ``overrides`` maps ``"section.key"`` to a string value and is applied on
    top of the file.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))
    known = {"simulator", "model", "loss", "training", "error_profile"}
    extra = set(parser.sections()) - known
    if extra:
        raise KeyError(f"unknown config sections {sorted(extra)}")

    def sec(name):
        return dict(parser.items(name)) if parser.has_section(name) else {}

    loss_sec = sec("loss")
    prior_csv = loss_sec.pop("prior_csv", None)
    return ExperimentConfig(
        sim=SimConfig.from_dict(sec("simulator")),
        model=ModelConfig.from_dict(sec("model")),
        loss=LossConfig(**_coerce(LossConfig, loss_sec, "loss")),
        train=TrainConfig(**_coerce(TrainConfig, sec("training"), "training")),
        error_profile=ErrorProfileConfig(**_coerce(ErrorProfileConfig, sec("error_profile"), "error_profile")),
        prior_csv=prior_csv,
    )
