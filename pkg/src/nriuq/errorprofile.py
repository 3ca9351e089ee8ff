"""Growth of integration and initial-condition errors along trajectories.

Two grids are tabulated, each a mean phase-space deviation as a function of
trajectory time and a second axis:

* computational error vs integration step, measured against a finer
  reference integration from identical initial conditions;
* physical error vs the standard deviation of a Gaussian perturbation of the
  initial state, same graph and integrator.

The deviation between two states is the mean absolute difference over all
particles and the four coordinates. The prior schedule used by the Bayesian
loss combines both grids with the typical one-step change of the data.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nriuq import kernels
from nriuq.dynamics import (
    Dataset,
    SimConfig,
    integrate_batch,
    sample_initial_conditions,
    sample_interaction_graph,
    simulation_rng,
)

DEFAULT_DT_GRID = (0.001, 0.002, 0.005, 0.01)
DEFAULT_SIGMA_GRID = (1e-5, 1e-4, 1e-3, 1e-2)

# Stream namespaces so the two grids never share random draws with datasets.
_COMP_STREAM = 101
_PHYS_STREAM = 102


@dataclass
class ErrorGrid:
    kind: str  # "comp" or "phys"
    times: np.ndarray  # (T,)
    axis2: np.ndarray  # (K,) dt values or perturbation sigmas
    mean_abs_deviation: np.ndarray  # (T, K)
    stderr: np.ndarray  # (T, K)
    n_effective: np.ndarray  # (K,) runs that did not blow up
    n_runs: int
    n_excluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        shape = (len(self.times), len(self.axis2))
        if self.mean_abs_deviation.shape != shape or self.stderr.shape != shape:
            raise ValueError(f"grid values must be {shape}")

    def late_time_mean(self, fraction: float = 0.5) -> np.ndarray:
        """Mean deviation per axis2 value over the last ``fraction`` of times."""
        start = int(len(self.times) * (1 - fraction))
        return self.mean_abs_deviation[start:].mean(axis=0)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis1", "axis2", "mean_deviation", "stderr", "n_effective"])
            for i, t in enumerate(self.times):
                for j, a in enumerate(self.axis2):
                    w.writerow([repr(float(t)), repr(float(a)), repr(float(self.mean_abs_deviation[i, j])),
                                repr(float(self.stderr[i, j])), int(self.n_effective[j])])

    @classmethod
    def from_csv(cls, path: str | Path, kind: str = "") -> "ErrorGrid":
        rows = list(csv.DictReader(open(path, newline="")))
        times = np.unique([float(r["axis1"]) for r in rows])
        axis2 = np.unique([float(r["axis2"]) for r in rows])
        mean = np.zeros((len(times), len(axis2)))
        err = np.zeros_like(mean)
        n_eff = np.zeros(len(axis2), dtype=int)
        for r in rows:
            i = np.searchsorted(times, float(r["axis1"]))
            j = np.searchsorted(axis2, float(r["axis2"]))
            mean[i, j] = float(r["mean_deviation"])
            err[i, j] = float(r["stderr"])
            n_eff[j] = int(r["n_effective"])
        return cls(kind, times, axis2, mean, err, n_eff, int(n_eff.max(initial=0)))


def phase_deviation(a: np.ndarray, b: np.ndarray, scale=None) -> np.ndarray:
    """Mean ``|a - b|`` over particles and coordinates, per leading index."""
    d = np.abs(a - b)
    if scale is not None:
        d = d / np.asarray(scale)
    return d.mean(axis=(-1, -2))


def _steps_per_sample(sample_dt: float, dt: float) -> int:
    ratio = sample_dt / dt
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9 * ratio:
        raise ValueError(f"sampling interval {sample_dt} is not a multiple of dt {dt}")
    return k


def _draw_runs(cfg: SimConfig, n_runs: int, stream: int):
    n = cfg.n_particles
    springs = np.zeros((n_runs, n, n), dtype=bool)
    charges = np.zeros((n_runs, n), dtype=bool)
    initial = np.zeros((n_runs, n, 4))
    rngs = []
    for i in range(n_runs):
        rng = simulation_rng(cfg.rng_seed, stream, i)
        g = sample_interaction_graph(cfg, rng)
        springs[i], charges[i] = g.springs, g.charges
        initial[i] = sample_initial_conditions(cfg, rng)
        rngs.append(rng)
    return initial, springs, charges, rngs


def _reduce(devs: np.ndarray, ok: np.ndarray):
    """Mean and standard error over runs (axis 0) keeping only ``ok`` runs."""
    kept = devs[ok]
    n = kept.shape[0]
    if n == 0:
        nan = np.full(devs.shape[1], np.nan)
        return nan, nan, 0
    mean = kept.mean(axis=0)
    err = kept.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, err, n


def computational_error(cfg: SimConfig, dt_grid=DEFAULT_DT_GRID, reference_dt: float | None = None,
                        horizon: int = 100, n_runs: int = 50, scale=None) -> ErrorGrid:
    """Deviation of coarse-step integrations from a fine reference.

    Every trajectory is sampled at ``cfg.effective_dt`` for ``horizon``
    intervals, so each ``dt`` must divide that interval.
    """
    dt_grid = np.asarray(dt_grid, dtype=np.float64)
    reference_dt = cfg.dt_fine / 2 if reference_dt is None else reference_dt
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if not reference_dt < dt_grid.min():
        raise ValueError("reference dt must be smaller than every dt in the grid")
    sample_dt = cfg.effective_dt
    n_samples = horizon + 1
    initial, springs, charges, _ = _draw_runs(cfg, n_runs, _COMP_STREAM)
    ref, ref_status = integrate_batch(initial, springs, charges, cfg, dt=reference_dt,
                                      sample_every=_steps_per_sample(sample_dt, reference_dt),
                                      n_samples=n_samples)
    times = np.arange(n_samples) * sample_dt
    mean = np.zeros((n_samples, len(dt_grid)))
    err = np.zeros_like(mean)
    n_eff = np.zeros(len(dt_grid), dtype=int)
    for j, dt in enumerate(dt_grid):
        run, status = integrate_batch(initial, springs, charges, cfg, dt=dt,
                                      sample_every=_steps_per_sample(sample_dt, dt), n_samples=n_samples)
        ok = (status == kernels.STATUS_OK) & (ref_status == kernels.STATUS_OK)
        devs = phase_deviation(run, ref, scale)
        mean[:, j], err[:, j], n_eff[j] = _reduce(devs, ok)
    return ErrorGrid("comp", times, dt_grid, mean, err, n_eff, n_runs, n_runs - n_eff)


def physical_error(cfg: SimConfig, sigma_grid=DEFAULT_SIGMA_GRID, horizon: int = 100,
                   n_runs: int = 50, scale=None) -> ErrorGrid:
    """Deviation caused by Gaussian noise of std ``sigma`` on all four initial coordinates."""
    sigma_grid = np.asarray(sigma_grid, dtype=np.float64)
    if (sigma_grid < 0).any():
        raise ValueError("perturbation sigmas must be non-negative")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    n_samples = horizon + 1
    initial, springs, charges, rngs = _draw_runs(cfg, n_runs, _PHYS_STREAM)
    base, base_status = integrate_batch(initial, springs, charges, cfg, n_samples=n_samples)
    # Unit-variance noise per run is drawn once and scaled for every sigma.
    unit = np.stack([rng.standard_normal(initial.shape[1:]) for rng in rngs])
    times = np.arange(n_samples) * cfg.effective_dt
    mean = np.zeros((n_samples, len(sigma_grid)))
    err = np.zeros_like(mean)
    n_eff = np.zeros(len(sigma_grid), dtype=int)
    for j, s in enumerate(sigma_grid):
        if s == 0:
            run, status = base, base_status
        else:
            run, status = integrate_batch(initial + s * unit, springs, charges, cfg, n_samples=n_samples)
        ok = (status == kernels.STATUS_OK) & (base_status == kernels.STATUS_OK)
        devs = phase_deviation(run, base, scale)
        mean[:, j], err[:, j], n_eff[j] = _reduce(devs, ok)
    return ErrorGrid("phys", times, sigma_grid, mean, err, n_eff, n_runs, n_runs - n_eff)


def delta_x0(data) -> float:
    """Mean absolute change between the first two sampled states.

    Accepts a :class:`Dataset` or an array ``(M, T, N, 4)``.
    """
    states = data.states if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    if states.ndim != 4 or states.shape[0] == 0 or states.shape[1] < 2:
        raise ValueError("need a non-empty (M, T>=2, N, 4) array of states")
    return float(np.mean(np.abs(states[:, 1] - states[:, 0])))


@dataclass
class PriorSchedule:
    delta_x0: float
    sigma: np.ndarray  # (n_steps,)
    clamped: list[str] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_index", "sigma"])
            for i, s in enumerate(self.sigma):
                w.writerow([i, repr(float(s))])

    @classmethod
    def from_csv(cls, path: str | Path) -> "PriorSchedule":
        rows = list(csv.DictReader(open(path, newline="")))
        sigma = np.array([float(r["sigma"]) for r in sorted(rows, key=lambda r: int(r["t_index"]))])
        return cls(float(sigma.min()) if sigma.size else 0.0, sigma)


def _interp_axis(axis: np.ndarray, x: float, label: str, notes: list[str]):
    """Bracketing indices and weight on ``axis``; clamps outside the range."""
    if x <= axis[0]:
        if x < axis[0]:
            notes.append(f"{label}={x:g} below grid, clamped to {axis[0]:g}")
        return 0, 0, 0.0
    if x >= axis[-1]:
        if x > axis[-1]:
            notes.append(f"{label}={x:g} above grid, clamped to {axis[-1]:g}")
        return len(axis) - 1, len(axis) - 1, 0.0
    hi = int(np.searchsorted(axis, x, side="right"))
    lo = hi - 1
    return lo, hi, (x - axis[lo]) / (axis[hi] - axis[lo])


def bilinear(times: np.ndarray, axis2: np.ndarray, values: np.ndarray, t: float, a: float,
             notes: list[str] | None = None) -> float:
    notes = [] if notes is None else notes
    i0, i1, wt = _interp_axis(np.asarray(times), t, "t", notes)
    j0, j1, wa = _interp_axis(np.asarray(axis2), a, "axis2", notes)
    v = values
    return float((1 - wt) * ((1 - wa) * v[i0, j0] + wa * v[i0, j1])
                 + wt * ((1 - wa) * v[i1, j0] + wa * v[i1, j1]))


def build_prior_schedule(comp: ErrorGrid, phys: ErrorGrid, delta_x0: float, model_dt: float,
                         n_steps: int, sample_dt: float | None = None,
                         t_offset: float = 0.0) -> PriorSchedule:
    """Per-step prior width ``sqrt(dx0^2 + comp(t, dt)^2 + phys(t, comp(t, dt))^2)``.

    Step ``k`` sits at time ``t_offset + k * sample_dt`` (``sample_dt``
    defaults to the grid's time spacing). The physical-error grid is read at
    a perturbation equal to the computational error at the same time; below
    its smallest sigma it is interpolated towards the exact zero at sigma = 0.
    Out-of-range lookups are clamped and recorded in ``clamped``.
    """
    if not delta_x0 > 0:
        raise ValueError("delta_x0 must be positive")
    if sample_dt is None:
        sample_dt = float(comp.times[1] - comp.times[0])
    notes: list[str] = []
    p_axis, p_vals = phys.axis2, phys.mean_abs_deviation
    if p_axis[0] > 0:
        p_axis = np.concatenate([[0.0], p_axis])
        p_vals = np.concatenate([np.zeros((p_vals.shape[0], 1)), p_vals], axis=1)
    sigma = np.empty(n_steps)
    for k in range(n_steps):
        t = t_offset + k * sample_dt
        c = bilinear(comp.times, comp.axis2, comp.mean_abs_deviation, t, model_dt, notes)
        p = bilinear(phys.times, p_axis, p_vals, t, c, notes)
        sigma[k] = np.sqrt(delta_x0 ** 2 + c ** 2 + p ** 2)
    return PriorSchedule(float(delta_x0), sigma, sorted(set(notes)))
