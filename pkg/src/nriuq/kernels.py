"""Hot integration kernels for the particle simulator.

Two interchangeable backends integrate a batch of independent systems with
kick-drift-kick leapfrog and elastic box walls:

* ``numba``: per-system loops compiled with ``@njit``.
* ``numpy``: the same update vectorised across the batch.

The backend is chosen at import time. Setting ``NRIUQ_DISABLE_NUMBA=1`` (or a
missing numba install) selects the numpy path; :func:`set_backend` switches at
runtime, which the benchmark uses to compare the two.
"""
from __future__ import annotations

import os
import warnings

import numpy as np

try:
    import numba
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    NUMBA_AVAILABLE = False

STATUS_OK = 0
STATUS_BLOWUP = 1


def _env_disabled() -> bool:
    return os.environ.get("NRIUQ_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


BACKEND = "numba" if NUMBA_AVAILABLE and not _env_disabled() else "numpy"


def set_threads(n: int) -> int:
    """Cap numba's worker pool; returns the count actually applied."""
    if not NUMBA_AVAILABLE:
        return 1
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    with warnings.catch_warnings():
        # an old system TBB only triggers a fallback to another threading layer
        warnings.filterwarnings("ignore", message=".*TBB.*")
        numba.set_num_threads(n)
    return n


if os.environ.get("NRIUQ_THREADS"):
    set_threads(int(os.environ["NRIUQ_THREADS"]))


def set_backend(name: str) -> None:
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    BACKEND = name


def get_backend() -> str:
    return BACKEND


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def forces_numpy(pos, springs, charges, k, charge_constant, softening):
    """Net force on every particle, vectorised over a leading batch axis.

    ``pos`` is ``(..., N, 2)``, ``springs`` ``(..., N, N)``, ``charges``
    ``(..., N)``. Unit masses, so this is also the acceleration.
    """
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    f = -k * np.einsum("...ij,...ijd->...id", springs, diff)
    if charge_constant != 0.0:
        r2 = np.sum(diff * diff, axis=-1) + softening * softening
        n = pos.shape[-2]
        r2[..., np.arange(n), np.arange(n)] = 1.0
        qq = charges[..., :, None] * charges[..., None, :]
        w = charge_constant * qq / (r2 * np.sqrt(r2))
        w[..., np.arange(n), np.arange(n)] = 0.0
        f = f + np.einsum("...ij,...ijd->...id", w, diff)
    return f


def reflect_numpy(pos, vel, half_width):
    """Mirror positions back into ``[-L, L]`` and flip the normal velocity.

    Iterates so that a particle crossing more than one wall width in a step is
    still folded back correctly. Returns a boolean per batch item saying
    whether anything was reflected.
    """
    hit = np.zeros(pos.shape[:-2], dtype=bool)
    if not np.isfinite(half_width):
        return hit
    while True:
        over = pos > half_width
        under = pos < -half_width
        out = over | under
        if not out.any():
            return hit
        hit |= out.any(axis=(-1, -2))
        pos[over] = 2.0 * half_width - pos[over]
        pos[under] = -2.0 * half_width - pos[under]
        vel[out] = -vel[out]


def integrate_numpy(pos0, vel0, springs, charges, k, charge_constant, softening,
                    half_width, dt, sample_every, n_samples):
    pos = np.array(pos0, dtype=np.float64)
    vel = np.array(vel0, dtype=np.float64)
    springs = np.asarray(springs, dtype=np.float64)
    charges = np.asarray(charges, dtype=np.float64)
    b, n = pos.shape[0], pos.shape[1]
    out = np.empty((b, n_samples, n, 4))
    status = np.zeros(b, dtype=np.int64)
    out[:, 0, :, :2] = pos
    out[:, 0, :, 2:] = vel
    acc = forces_numpy(pos, springs, charges, k, charge_constant, softening)
    half = 0.5 * dt
    for s in range(1, n_samples):
        for _ in range(sample_every):
            vel += half * acc
            pos += dt * vel
            acc = forces_numpy(pos, springs, charges, k, charge_constant, softening)
            vel += half * acc
            if reflect_numpy(pos, vel, half_width).any():
                acc = forces_numpy(pos, springs, charges, k, charge_constant, softening)
        out[:, s, :, :2] = pos
        out[:, s, :, 2:] = vel
    bad = ~np.isfinite(out).all(axis=(1, 2, 3))
    status[bad] = STATUS_BLOWUP
    return out, status


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _forces_one(pos, springs, charges, k, charge_constant, softening, out):
        n = pos.shape[0]
        soft2 = softening * softening
        for i in range(n):
            out[i, 0] = 0.0
            out[i, 1] = 0.0
        # Pairwise accumulation keeps F_ij = -F_ji exact.
        for i in range(n):
            for j in range(i + 1, n):
                dx = pos[i, 0] - pos[j, 0]
                dy = pos[i, 1] - pos[j, 1]
                w = -k * springs[i, j]
                qq = charges[i] * charges[j]
                if charge_constant != 0.0 and qq != 0.0:
                    r2 = dx * dx + dy * dy + soft2
                    w += charge_constant * qq / (r2 * np.sqrt(r2))
                fx = w * dx
                fy = w * dy
                out[i, 0] += fx
                out[i, 1] += fy
                out[j, 0] -= fx
                out[j, 1] -= fy

    @njit(cache=True)
    def _reflect_one(pos, vel, half_width):
        hit = False
        if not np.isfinite(half_width):
            return hit
        n = pos.shape[0]
        for i in range(n):
            for d in range(2):
                x = pos[i, d]
                # Bounded loop: a non-finite coordinate never satisfies either test.
                while x > half_width or x < -half_width:
                    if x > half_width:
                        x = 2.0 * half_width - x
                    else:
                        x = -2.0 * half_width - x
                    vel[i, d] = -vel[i, d]
                    hit = True
                pos[i, d] = x
        return hit

    @njit(cache=True)
    def _integrate_numba(pos0, vel0, springs, charges, k, charge_constant, softening,
                         half_width, dt, sample_every, n_samples, out, status):
        b = pos0.shape[0]
        n = pos0.shape[1]
        half = 0.5 * dt
        for m in range(b):
            pos = pos0[m].copy()
            vel = vel0[m].copy()
            acc = np.empty((n, 2))
            _forces_one(pos, springs[m], charges[m], k, charge_constant, softening, acc)
            for i in range(n):
                out[m, 0, i, 0] = pos[i, 0]
                out[m, 0, i, 1] = pos[i, 1]
                out[m, 0, i, 2] = vel[i, 0]
                out[m, 0, i, 3] = vel[i, 1]
            for s in range(1, n_samples):
                for _ in range(sample_every):
                    for i in range(n):
                        for d in range(2):
                            vel[i, d] += half * acc[i, d]
                            pos[i, d] += dt * vel[i, d]
                    _forces_one(pos, springs[m], charges[m], k, charge_constant, softening, acc)
                    for i in range(n):
                        for d in range(2):
                            vel[i, d] += half * acc[i, d]
                    if _reflect_one(pos, vel, half_width):
                        _forces_one(pos, springs[m], charges[m], k, charge_constant, softening, acc)
                finite = True
                for i in range(n):
                    out[m, s, i, 0] = pos[i, 0]
                    out[m, s, i, 1] = pos[i, 1]
                    out[m, s, i, 2] = vel[i, 0]
                    out[m, s, i, 3] = vel[i, 1]
                    for d in range(2):
                        if not (np.isfinite(pos[i, d]) and np.isfinite(vel[i, d])):
                            finite = False
                if not finite:
                    status[m] = STATUS_BLOWUP
                    for r in range(s + 1, n_samples):
                        for i in range(n):
                            for c in range(4):
                                out[m, r, i, c] = np.nan
                    break


def integrate(pos0, vel0, springs, charges, *, k, charge_constant, softening,
              half_width, dt, sample_every, n_samples, backend=None):
    """Integrate a batch of systems and return sampled states.

    Parameters
    ----------
    pos0, vel0 : (B, N, 2) array
        Initial positions and velocities.
    springs : (B, N, N) array
        Symmetric 0/1 spring adjacency.
    charges : (B, N) array
        Per-particle charges (0 or +-1).
    half_width : float
        Box half width; ``np.inf`` disables walls.
    dt : float
        Fine integration step.
    sample_every, n_samples : int
        A state is recorded every ``sample_every`` fine steps, starting with
        the initial state, until ``n_samples`` states are stored.

    Returns
    -------
    states : (B, n_samples, N, 4) float64 array ordered ``(x, y, vx, vy)``
    status : (B,) int array, ``STATUS_BLOWUP`` where the state went non-finite
    """
    pos0 = np.ascontiguousarray(pos0, dtype=np.float64)
    vel0 = np.ascontiguousarray(vel0, dtype=np.float64)
    springs = np.ascontiguousarray(springs, dtype=np.float64)
    charges = np.ascontiguousarray(charges, dtype=np.float64)
    if pos0.ndim != 3 or pos0.shape[-1] != 2 or vel0.shape != pos0.shape:
        raise ValueError(f"positions/velocities must be (B, N, 2), got {pos0.shape} and {vel0.shape}")
    if n_samples < 1 or sample_every < 1:
        raise ValueError("n_samples and sample_every must be >= 1")
    backend = backend or BACKEND
    args = (float(k), float(charge_constant), float(softening), float(half_width),
            float(dt), int(sample_every), int(n_samples))
    if backend == "numba":
        b, n = pos0.shape[:2]
        out = np.empty((b, n_samples, n, 4))
        status = np.zeros(b, dtype=np.int64)
        _integrate_numba(pos0, vel0, springs, charges, *args, out, status)
        return out, status
    return integrate_numpy(pos0, vel0, springs, charges, *args)
