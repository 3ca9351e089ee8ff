"""Compare the numba and numpy integration backends.

    python3 benchmarks/bench_kernels.py [--sims 10 50 200] [--steps 100] [--repeat 3]

Both backends integrate the same batch of default systems; the script checks
they agree before reporting the best wall time of each.
"""
import argparse
import time

import numpy as np

from nriuq import kernels
from nriuq.dynamics import SimConfig, sample_initial_conditions, sample_interaction_graph, simulation_rng


def draw(cfg, n):
    init = np.zeros((n, cfg.n_particles, 4))
    springs = np.zeros((n, cfg.n_particles, cfg.n_particles), dtype=bool)
    charges = np.zeros((n, cfg.n_particles), dtype=bool)
    for i in range(n):
        rng = simulation_rng(0, 99, i)
        g = sample_interaction_graph(cfg, rng)
        springs[i], charges[i] = g.springs, g.charges
        init[i] = sample_initial_conditions(cfg, rng)
    return init, springs, charges


def run(backend, cfg, init, springs, charges, n_samples):
    return kernels.integrate(init[..., :2], init[..., 2:], springs, charges, k=cfg.spring_constant,
                             charge_constant=cfg.charge_constant, softening=cfg.softening,
                             half_width=cfg.box_half_width, dt=cfg.dt_fine, sample_every=cfg.sample_every,
                             n_samples=n_samples, backend=backend)


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sims", type=int, nargs="+", default=[10, 50, 200])
    ap.add_argument("--steps", type=int, default=100, help="sampled steps per trajectory")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    cfg = SimConfig()
    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    # compile outside the timed region
    init, springs, charges = draw(cfg, 2)
    run("numba", cfg, init, springs, charges, 2)

    print(f"{'sims':>6} {'fine steps':>11} {'numba s':>9} {'numpy s':>9} {'speedup':>8} {'max |diff|':>11}")
    for n in args.sims:
        init, springs, charges = draw(cfg, n)
        a, _ = run("numba", cfg, init, springs, charges, args.steps)
        b, _ = run("numpy", cfg, init, springs, charges, args.steps)
        diff = float(np.abs(a - b).max())
        t_nb = best_time(lambda: run("numba", cfg, init, springs, charges, args.steps), args.repeat)
        t_np = best_time(lambda: run("numpy", cfg, init, springs, charges, args.steps), args.repeat)
        fine = (args.steps - 1) * cfg.sample_every
        print(f"{n:>6} {fine:>11} {t_nb:>9.3f} {t_np:>9.3f} {t_np / t_nb:>7.1f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()
