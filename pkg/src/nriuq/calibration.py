"""Uncertainty quality: z-scores, histogram fits, MSE, edge accuracy, pathologies."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

CONSTANT_SIGMA = "CONSTANT_SIGMA"
OVERESTIMATED_SIGMA = "OVERESTIMATED_SIGMA"

COORDS = ("x", "y", "vx", "vy")


@dataclass
class ZScoreSet:
    values: np.ndarray  # flat, pooled over every coordinate
    per_coordinate: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.values.size

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


def z_scores(pred, target, sigma) -> ZScoreSet:
    """Standardised residuals ``(pred - target) / sigma``.

    ``sigma`` broadcasts against ``pred``; a 2-channel field is read as one
    value for position and one for velocity.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    if sigma.ndim and sigma.shape[-1] == 2 and pred.shape[-1] == 4:
        sigma = sigma[..., [0, 0, 1, 1]]
    if not (sigma > 0).all():
        raise ValueError("sigma must be strictly positive")
    z = (pred - target) / sigma
    if not np.isfinite(z).all():
        raise ValueError("non-finite z-scores")
    per = {}
    if z.ndim and z.shape[-1] == 4:
        per = {name: z[..., i].ravel() for i, name in enumerate(COORDS)}
    return ZScoreSet(z.ravel(), per)


# -- distribution fits -------------------------------------------------------

def gaussian_pdf(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))


def gaussian_cdf(x, mu, sigma):
    return 0.5 * special.erfc(-(x - mu) / (sigma * np.sqrt(2)))


def lorentzian_pdf(x, x0, gamma):
    """Cauchy density parameterised by its full width at half maximum."""
    h = 0.5 * gamma
    return (h / np.pi) / ((x - x0) ** 2 + h * h)


def lorentzian_cdf(x, x0, gamma):
    return 0.5 + np.arctan((x - x0) / (0.5 * gamma)) / np.pi


_FAMILIES = {"gaussian": gaussian_cdf, "lorentzian": lorentzian_cdf}


@dataclass
class FitResult:
    family: str
    location: float
    scale: float  # sigma for the Gaussian, FWHM gamma for the Lorentzian
    qof: float
    ok: bool


@dataclass
class FitReport:
    edges: np.ndarray
    density: np.ndarray
    counts: np.ndarray
    gaussian: FitResult
    lorentzian: FitResult
    n_samples: int

    @property
    def best(self) -> str | None:
        ok = [f for f in (self.gaussian, self.lorentzian) if f.ok]
        if not ok:
            return None
        return min(ok, key=lambda f: f.qof).family

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])


def _bin_model(cdf, params, edges):
    # Bin-averaged density of the distribution truncated to the histogram range.
    c = cdf(edges, *params)
    mass = c[-1] - c[0]
    return np.diff(c) / (np.diff(edges) * mass)


def _fit_family(name, edges, density, err, starts) -> FitResult:
    cdf = _FAMILIES[name]
    n_dof = max(len(density) - 2, 1)

    def resid(p):
        loc, log_scale = p
        return (_bin_model(cdf, (loc, np.exp(log_scale)), edges) - density) / err

    best = None
    for loc0, scale0 in starts:
        try:
            sol = optimize.least_squares(resid, [loc0, np.log(scale0)], method="lm",
                                         xtol=1e-12, ftol=1e-12, max_nfev=2000)
        except (ValueError, FloatingPointError):
            continue
        chi2 = float(np.sum(sol.fun ** 2))
        if not (sol.success and np.isfinite(chi2) and np.all(np.isfinite(sol.x))):
            continue
        if best is None or chi2 < best[0]:
            best = (chi2, sol.x)
    if best is None:
        return FitResult(name, float("nan"), float("nan"), float("inf"), False)
    chi2, (loc, log_scale) = best
    return FitResult(name, float(loc), float(np.exp(log_scale)), chi2 / n_dof, True)


def histogram(values, n_bins: int = 100, central: float = 0.99):
    """Density histogram over the central ``central`` quantile range."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    lo, hi = np.quantile(values, [(1 - central) / 2, 1 - (1 - central) / 2])
    if not hi > lo:
        raise ValueError("degenerate sample: no spread in the central range")
    counts, edges = np.histogram(values, bins=n_bins, range=(lo, hi))
    density = counts / (counts.sum() * np.diff(edges))
    return edges, density, counts


def fit_distributions(zset, n_bins: int = 100, central: float = 0.99) -> FitReport:
    """Least-squares Gaussian and Lorentzian fits to the z-score histogram.

    Bin heights are compared with bin-averaged densities of each family
    truncated to the histogram range. The quality of fit is the reduced chi
    square with Poisson bin variances; smaller is better.
    """
    values = zset.values if isinstance(zset, ZScoreSet) else np.asarray(zset, dtype=np.float64).ravel()
    if values.size < 1000:
        raise ValueError(f"need at least 1000 samples, got {values.size}")
    edges, density, counts = histogram(values, n_bins, central)
    n = counts.sum()
    err = np.sqrt(np.maximum(counts, 1)) / (n * np.diff(edges))
    med = float(np.median(values))
    q25, q75 = np.quantile(values, [0.25, 0.75])
    iqr = max(float(q75 - q25), 1e-12)
    # IQR of a Gaussian is 1.349 sigma; of a Cauchy it equals its FWHM.
    g_starts = [(med, iqr / 1.349 * f) for f in (1.0, 0.5, 2.0)]
    l_starts = [(med, iqr * f) for f in (1.0, 0.5, 2.0)]
    return FitReport(edges, density, counts,
                     _fit_family("gaussian", edges, density, err, g_starts),
                     _fit_family("lorentzian", edges, density, err, l_starts),
                     int(values.size))


# -- point metrics -------------------------------------------------------------

def mse_metric(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    return float(np.mean((pred - target) ** 2))


def mse_by_step(pred, target, time_axis: int = 1) -> np.ndarray:
    err = (np.asarray(pred) - np.asarray(target)) ** 2
    axes = tuple(i for i in range(err.ndim) if i != time_axis % err.ndim)
    return err.mean(axis=axes)


def edge_accuracy_by_factor(logits, labels) -> tuple[float, np.ndarray]:
    """Edge accuracy with the best global factor/label matching.

    ``logits`` is ``(B, E, F, K)`` posterior logits (or probabilities),
    ``labels`` is ``(B, E, F)`` ground-truth binary labels. The argmax edge
    types of each learned factor are matched to ground-truth factors by the
    permutation and per-factor label flips maximising agreement over the
    whole set. Returns overall percent and per ground-truth factor percent.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"posterior {logits.shape} does not match labels {labels.shape}")
    if logits.shape[-1] != 2:
        raise ValueError("edge accuracy expects two edge types per factor")
    hard = np.argmax(logits, axis=-1)
    n_factors = labels.shape[-1]
    # agree[a, b, flip]: accuracy of learned factor a (optionally flipped) against truth b.
    agree = np.zeros((n_factors, n_factors, 2))
    for a in range(n_factors):
        for b in range(n_factors):
            same = np.mean(hard[..., a] == labels[..., b])
            agree[a, b] = (same, 1.0 - same)
    best_total, best_per = -1.0, None
    for perm in itertools.permutations(range(n_factors)):
        per = np.array([agree[perm[b], b].max() for b in range(n_factors)])
        if per.mean() > best_total:
            best_total, best_per = per.mean(), per
    return 100.0 * float(best_total), 100.0 * best_per


def edge_accuracy(logits, labels) -> float:
    return edge_accuracy_by_factor(logits, labels)[0]


# -- pathology detection -------------------------------------------------------

def detect_pathologies(sigma_iqr, sigma0: float, z_abs_median: float | None = None,
                       mse_steps=None, iqr_tol: float = 0.01, z_tol: float = 0.2,
                       mse_ratio: float = 10.0) -> set[str]:
    """Flag the two degenerate training outcomes.

    ``CONSTANT_SIGMA`` when the per-epoch interquartile range of predicted
    sigma stays below ``iqr_tol * sigma0`` over the final half of training.
    ``OVERESTIMATED_SIGMA`` when the median ``|z|`` is below ``z_tol`` while
    the late rollout MSE (last quarter of steps) exceeds ``mse_ratio`` times
    the early MSE (first quarter).
    """
    iqr = np.asarray(sigma_iqr, dtype=np.float64)
    if iqr.size < 10:
        raise ValueError("pathology detection needs at least 10 epochs of sigma statistics")
    flags = set()
    tail = iqr[iqr.size // 2:]
    if np.all(tail < iqr_tol * sigma0):
        flags.add(CONSTANT_SIGMA)
    if z_abs_median is not None and mse_steps is not None:
        mse = np.asarray(mse_steps, dtype=np.float64)
        q = max(mse.size // 4, 1)
        early, late = mse[:q].mean(), mse[-q:].mean()
        if z_abs_median < z_tol and late > mse_ratio * early:
            flags.add(OVERESTIMATED_SIGMA)
    return flags
