"""Spring/charge particle systems in a 2D box with elastic walls."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from nriuq import kernels

SPLITS = ("train", "valid", "test")


class SimulationError(RuntimeError):
    """Integration produced a non-finite state."""


@dataclass
class SimConfig:
    n_particles: int = 5
    box_half_width: float = 5.0
    dt_fine: float = 0.001
    sample_every: int = 100
    n_sampled_steps: int = 100
    spring_constant: float = 0.5
    # Negative values make like charges attract.
    charge_constant: float = 1.0
    softening: float = 0.1
    init_pos_sigma: float = 0.5
    init_speed: float = 0.5
    spring_edge_prob: float = 0.5
    charge_prob: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("n_particles", "box_half_width", "dt_fine", "sample_every",
                    "n_sampled_steps", "spring_constant", "softening", "init_pos_sigma")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"SimConfig.{name} must be positive, got {getattr(self, name)!r}")
        if self.init_speed < 0:
            raise ValueError("SimConfig.init_speed must be non-negative")
        for name in ("spring_edge_prob", "charge_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"SimConfig.{name} must lie in [0, 1], got {p!r}")

    @property
    def effective_dt(self) -> float:
        return self.dt_fine * self.sample_every

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise KeyError(f"unknown simulator key {key!r}")
            kwargs[key] = int(value) if known[key] == "int" else float(value)
        return cls(**kwargs)


@dataclass
class InteractionGraph:
    springs: np.ndarray
    charges: np.ndarray

    def __post_init__(self):
        self.springs = np.asarray(self.springs, dtype=bool)
        self.charges = np.asarray(self.charges, dtype=bool)
        n = self.charges.shape[0]
        if self.springs.shape != (n, n):
            raise ValueError(f"springs must be ({n}, {n}), got {self.springs.shape}")
        if not np.array_equal(self.springs, self.springs.T):
            raise ValueError("spring adjacency must be symmetric")
        if self.springs.diagonal().any():
            raise ValueError("spring adjacency must have an empty diagonal")

    @property
    def n_particles(self) -> int:
        return self.charges.shape[0]

    def charge_edges(self) -> np.ndarray:
        """Pairs that feel a charge interaction, i.e. both particles charged."""
        e = np.outer(self.charges, self.charges)
        np.fill_diagonal(e, False)
        return e


@dataclass
class Trajectory:
    states: np.ndarray  # (T, N, 4): x, y, vx, vy
    graph: InteractionGraph
    effective_dt: float

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass
class Dataset:
    split: str
    states: np.ndarray  # (M, T, N, 4), values exactly representable in float32
    springs: np.ndarray  # (M, N, N) bool
    charges: np.ndarray  # (M, N) bool
    normalization: np.ndarray  # (4,) max-abs scale of x, y, vx, vy
    effective_dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.normalization = np.asarray(self.normalization, dtype=np.float64)
        if self.normalization.shape != (4,) or not (self.normalization > 0).all():
            raise ValueError("normalization factors must be 4 strictly positive values")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n_particles(self) -> int:
        return self.states.shape[2]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1]

    def normalized(self) -> np.ndarray:
        return self.states / self.normalization

    def graph(self, i: int) -> InteractionGraph:
        return InteractionGraph(self.springs[i], self.charges[i])

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.graph(i), self.effective_dt)

    def __iter__(self):
        return (self.trajectory(i) for i in range(len(self)))


def simulation_rng(seed: int, split_index: int, sim_index: int) -> np.random.Generator:
    """Independent stream per simulation, so results ignore execution order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(split_index), int(sim_index)]))


def sample_interaction_graph(cfg: SimConfig, rng: np.random.Generator) -> InteractionGraph:
    n = cfg.n_particles
    iu = np.triu_indices(n, k=1)
    springs = np.zeros((n, n), dtype=bool)
    springs[iu] = rng.random(len(iu[0])) < cfg.spring_edge_prob
    springs = springs | springs.T
    charges = rng.random(n) < cfg.charge_prob
    return InteractionGraph(springs, charges)


def sample_initial_conditions(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian positions resampled until inside the box; fixed-speed velocities."""
    n = cfg.n_particles
    pos = rng.normal(0.0, cfg.init_pos_sigma, size=(n, 2))
    while True:
        bad = np.abs(pos) > cfg.box_half_width
        if not bad.any():
            break
        pos[bad] = rng.normal(0.0, cfg.init_pos_sigma, size=int(bad.sum()))
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
    vel = cfg.init_speed * np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    return np.concatenate([pos, vel], axis=-1)


def _physics(cfg: SimConfig) -> dict:
    return dict(k=cfg.spring_constant, charge_constant=cfg.charge_constant,
                softening=cfg.softening, half_width=cfg.box_half_width)


def pairwise_forces(state: np.ndarray, graph: InteractionGraph, cfg: SimConfig) -> np.ndarray:
    """Force on ``i`` due to ``j`` as an ``(N, N, 2)`` array."""
    pos = np.asarray(state, dtype=np.float64)[:, :2]
    if not np.isfinite(pos).all():
        raise ValueError("positions must be finite")
    diff = pos[:, None, :] - pos[None, :, :]
    w = -cfg.spring_constant * graph.springs.astype(np.float64)
    q = graph.charges.astype(np.float64)
    r2 = np.sum(diff * diff, axis=-1) + cfg.softening ** 2
    w = w + cfg.charge_constant * np.outer(q, q) / (r2 * np.sqrt(r2))
    np.fill_diagonal(w, 0.0)
    return w[..., None] * diff


def compute_forces(state: np.ndarray, graph: InteractionGraph, cfg: SimConfig) -> np.ndarray:
    pos = np.asarray(state, dtype=np.float64)[:, :2]
    if not np.isfinite(pos).all():
        raise ValueError("positions must be finite")
    return kernels.forces_numpy(pos, graph.springs.astype(np.float64),
                                graph.charges.astype(np.float64), cfg.spring_constant,
                                cfg.charge_constant, cfg.softening)


def potential_energy(state: np.ndarray, graph: InteractionGraph, cfg: SimConfig) -> float:
    pos = np.asarray(state)[:, :2]
    iu = np.triu_indices(graph.n_particles, k=1)
    diff = pos[:, None, :] - pos[None, :, :]
    r2 = np.sum(diff * diff, axis=-1)[iu]
    q = graph.charges.astype(np.float64)
    spring = 0.5 * cfg.spring_constant * np.sum(graph.springs[iu] * r2)
    coulomb = cfg.charge_constant * np.sum(np.outer(q, q)[iu] / np.sqrt(r2 + cfg.softening ** 2))
    return float(spring + coulomb)


def total_energy(state: np.ndarray, graph: InteractionGraph, cfg: SimConfig) -> float:
    vel = np.asarray(state)[:, 2:]
    return 0.5 * float(np.sum(vel * vel)) + potential_energy(state, graph, cfg)


def leapfrog_step(state: np.ndarray, graph: InteractionGraph, cfg: SimConfig, dt: float) -> np.ndarray:
    """One kick-drift-kick step followed by wall reflection."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    state = np.asarray(state, dtype=np.float64)
    out, _ = kernels.integrate(state[None, :, :2], state[None, :, 2:],
                               graph.springs[None], graph.charges[None],
                               dt=dt, sample_every=1, n_samples=2, **_physics(cfg))
    return out[0, 1]


def integrate_batch(initial: np.ndarray, springs: np.ndarray, charges: np.ndarray,
                    cfg: SimConfig, dt: float | None = None, sample_every: int | None = None,
                    n_samples: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Integrate many systems at once; thin wrapper over the active kernel."""
    initial = np.asarray(initial, dtype=np.float64)
    return kernels.integrate(initial[..., :2], initial[..., 2:], springs, charges,
                             dt=cfg.dt_fine if dt is None else dt,
                             sample_every=cfg.sample_every if sample_every is None else sample_every,
                             n_samples=cfg.n_sampled_steps if n_samples is None else n_samples,
                             **_physics(cfg))


def simulate_trajectory(graph: InteractionGraph, initial: np.ndarray, cfg: SimConfig) -> Trajectory:
    states, status = integrate_batch(np.asarray(initial)[None], graph.springs[None],
                                     graph.charges[None], cfg)
    if status[0] != kernels.STATUS_OK:
        bad = int(np.argmax(~np.isfinite(states[0]).all(axis=(1, 2))))
        raise SimulationError(f"state became non-finite at sampled step {bad}")
    return Trajectory(states[0], graph, cfg.effective_dt)


def _simulate_split(cfg: SimConfig, count: int, seed: int, split_index: int):
    n = cfg.n_particles
    springs = np.zeros((count, n, n), dtype=bool)
    charges = np.zeros((count, n), dtype=bool)
    initial = np.zeros((count, n, 4))
    for i in range(count):
        rng = simulation_rng(seed, split_index, i)
        g = sample_interaction_graph(cfg, rng)
        springs[i], charges[i] = g.springs, g.charges
        initial[i] = sample_initial_conditions(cfg, rng)
    states, status = integrate_batch(initial, springs, charges, cfg)
    if (status != kernels.STATUS_OK).any():
        bad = np.flatnonzero(status)
        raise SimulationError(f"{len(bad)} simulations blew up (first index {bad[0]})")
    # Storage is float32; normalization is computed from the stored values.
    return states.astype(np.float32).astype(np.float64), springs, charges


def generate_dataset(cfg: SimConfig, counts, seed: int | None = None,
                     out_dir: str | Path | None = None) -> dict[str, Dataset]:
    """Simulate train/valid/test splits; normalization comes from train only.

    ``counts`` is a ``(train, valid, test)`` triple or a mapping keyed by split.
    When ``out_dir`` is given, one ``<split>.tuld`` file per split is written.
    """
    if not isinstance(counts, dict):
        counts = dict(zip(SPLITS, counts))
    if any(int(counts[s]) < 1 for s in SPLITS):
        raise ValueError("every split needs at least one simulation")
    seed = cfg.rng_seed if seed is None else seed
    raw = {s: _simulate_split(cfg, int(counts[s]), seed, i) for i, s in enumerate(SPLITS)}
    norm = np.max(np.abs(raw["train"][0]), axis=(0, 1, 2))
    norm[norm == 0] = 1.0
    meta = {"seed": int(seed)}
    out = {s: Dataset(s, *raw[s], normalization=norm, effective_dt=cfg.effective_dt, meta=dict(meta))
           for s in SPLITS}
    if out_dir is not None:
        from nriuq.dataio import write_dataset

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for s, ds in out.items():
            write_dataset(out_dir / f"{s}.tuld", ds)
    return out
