"""Training objectives: reconstruction likelihoods, latent KL and extras.

All reductions are sums over batch, time, particles and coordinates. Inputs
may be :class:`~nriuq.autodiff.Tensor` or plain arrays; ``pred`` and
``target`` are ``(..., 4)`` and ``sigma`` is ``(..., m)`` with ``m`` in
``{1, 2, 4}`` (isotropic, position/velocity, per coordinate).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import multigammaln

from nriuq import autodiff as ad
from nriuq.autodiff import Tensor

LOSS_KINDS = ("fixed", "iso_gauss", "semi_iso_gauss", "aniso_gauss", "lorentzian", "aniso_gauss_kl", "niw")

# sigma_mode each kind needs from the model; None means any learned mode.
REQUIRED_SIGMA_MODE = {
    "fixed": "fixed",
    "iso_gauss": "isotropic",
    "semi_iso_gauss": "semi-isotropic",
    "aniso_gauss": "anisotropic",
    "aniso_gauss_kl": "anisotropic",
    "niw": "anisotropic",
    "lorentzian": None,
}

_SEMI_INDEX = np.array([0, 0, 1, 1])


def expand_sigma(sigma, shape) -> Tensor:
    """Spread a 1-, 2- or 4-channel sigma field over the four coordinates."""
    sigma = ad.as_tensor(sigma)
    m = sigma.shape[-1]
    if m == 2:
        sigma = ad.take(sigma, _SEMI_INDEX, axis=-1)
    elif m not in (1, 4):
        raise ad.ShapeError("expand_sigma", sigma.shape, shape)
    return ad.broadcast_to(sigma, shape)


def _check_positive(sigma: Tensor) -> None:
    if not (sigma.data > 0).all():
        raise ValueError("sigma must be strictly positive")


def _residual(pred, target) -> Tensor:
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ad.ShapeError("residual", pred.shape, target.shape)
    return pred - target


def nll_fixed(pred, target, sigma2: float = 5e-5) -> Tensor:
    if not sigma2 > 0:
        raise ValueError("fixed variance must be positive")
    r = _residual(pred, target)
    return ad.tsum(ad.square(r)) * (1.0 / (2.0 * sigma2))


def nll_gaussian(pred, target, sigma) -> Tensor:
    """Diagonal-covariance Gaussian NLL without the ``2 pi`` constant.

    ``sum(r**2 / (2 s**2) + log(s**2) / 2)`` with ``s`` the sigma field spread
    over coordinates, so a 4-channel field with equal values gives exactly the
    isotropic result.
    """
    r = _residual(pred, target)
    s = expand_sigma(sigma, r.shape)
    _check_positive(s)
    s2 = ad.square(s)
    return ad.tsum(ad.square(r) / (2.0 * s2) + 0.5 * ad.log(s2))


def nll_lorentzian(pred, target, sigma) -> Tensor:
    """``sum(log(1 + r**2 / g**2) + log(g))`` with ``g`` the width field."""
    r = _residual(pred, target)
    g = expand_sigma(sigma, r.shape)
    _check_positive(g)
    return ad.tsum(ad.log(1.0 + ad.square(r) / ad.square(g)) + ad.log(g))


def latent_kl(logits) -> Tensor:
    """KL of the categorical edge posterior against a uniform prior.

    ``logits`` is ``(..., K)``; the result is summed over every leading axis.
    """
    logits = ad.as_tensor(logits)
    k = logits.shape[-1]
    logq = ad.log_softmax(logits, axis=-1)
    q = ad.exp(logq)
    return ad.tsum(q * (logq + np.log(k)))


def convex_weight(epoch: int, lambda0: float = 1.0, decay: float = 0.99) -> float:
    if lambda0 < 0:
        raise ValueError("convexification weight must be non-negative")
    return lambda0 * decay ** epoch


def convexify(pred, target, sigma, sigma0: float, weight: float) -> Tensor:
    """Quadratic anchor ``weight * sum(r**2 + (sigma - sigma0)**2)``."""
    if weight < 0:
        raise ValueError("convexification weight must be non-negative")
    r = _residual(pred, target)
    s = ad.as_tensor(sigma)
    return (ad.tsum(ad.square(r)) + ad.tsum(ad.square(s - sigma0))) * weight


def _prior_sigma(prior_sigma, shape) -> np.ndarray:
    p = np.asarray(prior_sigma, dtype=np.float64)
    # (T,) or (T, 4) schedules align with the time axis of (..., T, N, 4).
    if p.ndim == 1:
        p = p[:, None, None]
    elif p.ndim == 2:
        p = p[:, None, :]
    if not (p > 0).all():
        raise ValueError("prior sigma must be positive")
    try:
        return np.broadcast_to(p, shape)
    except ValueError:
        raise ad.ShapeError("prior schedule", p.shape, shape) from None


def bayes_gaussian_kl(pred, sigma, target, prior_sigma) -> Tensor:
    """Sum of ``KL(N(pred, sigma^2) || N(target, prior^2))`` per element."""
    r = _residual(pred, target)
    s = expand_sigma(sigma, r.shape)
    _check_positive(s)
    sp = _prior_sigma(prior_sigma, r.shape)
    return ad.tsum(np.log(sp) - ad.log(s) + (ad.square(s) + ad.square(r)) / (2.0 * sp * sp) - 0.5)


@dataclass
class NIWParams:
    mu: np.ndarray
    kappa: float
    psi: np.ndarray
    nu: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.psi = np.asarray(self.psi, dtype=np.float64)
        d = self.mu.shape[0]
        if self.psi.shape != (d, d):
            raise ValueError("psi must be d x d")
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.nu > d - 1:
            raise ValueError(f"nu must exceed d - 1 = {d - 1}")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def default(cls, d: int = 4, kappa0: float = 1.0, psi_scale: float = 1e-4, nu0: float = 6.0):
        return cls(np.zeros(d), kappa0, psi_scale * np.eye(d), nu0)


def niw_update(prior: NIWParams, samples) -> NIWParams:
    """Conjugate update of a Normal-Inverse-Wishart prior with ``(n, d)`` samples."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, prior.dim)
    n = x.shape[0]
    if n == 0:
        return NIWParams(prior.mu.copy(), prior.kappa, prior.psi.copy(), prior.nu)
    xbar = x.mean(axis=0)
    c = x - xbar
    scatter = c.T @ c
    kn = prior.kappa + n
    dm = (xbar - prior.mu)[:, None]
    psi = prior.psi + scatter + (prior.kappa * n / kn) * (dm @ dm.T)
    mu = (prior.kappa * prior.mu + n * xbar) / kn
    return NIWParams(mu, kn, psi, prior.nu + n)


def niw_neg_log_posterior(pred, sigma, target, prior: NIWParams) -> Tensor:
    """``-log NIW(mean=pred_i, cov=diag(sigma_i^2))`` summed over points.

    The posterior hyperparameters come from updating ``prior`` with every
    target vector in the batch. Constants are included.
    """
    pred = ad.as_tensor(pred)
    d = prior.dim
    if pred.shape[-1] != d:
        raise ad.ShapeError("niw", pred.shape, (d,))
    s = expand_sigma(sigma, pred.shape)
    if not (s.data > 0).all():
        raise ValueError("covariance is singular: sigma must be strictly positive")
    post = niw_update(prior, np.asarray(target.data if isinstance(target, Tensor) else target))
    n_points = int(np.prod(pred.shape[:-1]))
    _, logdet_psi = np.linalg.slogdet(post.psi)
    const = n_points * (0.5 * d * np.log(2.0 * np.pi) - 0.5 * d * np.log(post.kappa)
                        - 0.5 * post.nu * logdet_psi + 0.5 * post.nu * d * np.log(2.0)
                        + multigammaln(0.5 * post.nu, d))
    s2 = ad.square(s)
    log_s2 = ad.log(s2)
    dev = ad.square(pred - post.mu)
    psi_diag = np.diag(post.psi)
    per_coord = (0.5 * log_s2 + 0.5 * post.kappa * dev / s2
                 + 0.5 * (post.nu + d + 1) * log_s2 + 0.5 * psi_diag / s2)
    return ad.tsum(per_coord) + const


@dataclass
class LossConfig:
    kind: str = "fixed"
    fixed_sigma2: float = 5e-5
    convexify: bool = False
    convex_lambda0: float = 1.0
    convex_decay: float = 0.99
    # +1 penalises posterior divergence (VAE objective); -1 is the literal sign.
    kl_sign: float = 1.0
    kl_weight: float = 1.0
    niw_kappa0: float = 1.0
    niw_psi_scale: float = 1e-4
    niw_nu0: float = 6.0
    prior_sigma: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.fixed_sigma2 > 0:
            raise ValueError("fixed_sigma2 must be positive")
        if self.convex_lambda0 < 0:
            raise ValueError("convex_lambda0 must be non-negative")
        if self.kl_sign not in (1.0, -1.0):
            raise ValueError("kl_sign must be +1 or -1")
        if not self.niw_kappa0 > 0 or not self.niw_nu0 > 3:
            raise ValueError("NIW prior needs kappa0 > 0 and nu0 > d - 1 = 3")

    def niw_prior(self, d: int = 4) -> NIWParams:
        return NIWParams.default(d, self.niw_kappa0, self.niw_psi_scale, self.niw_nu0)

    def check_sigma_mode(self, sigma_mode: str) -> None:
        need = REQUIRED_SIGMA_MODE[self.kind]
        if need is None:
            if sigma_mode == "fixed":
                raise ValueError(f"loss {self.kind!r} needs a learned sigma")
        elif sigma_mode != need:
            raise ValueError(f"loss {self.kind!r} needs sigma_mode {need!r}, model has {sigma_mode!r}")


@dataclass
class LossValue:
    total: Tensor
    components: dict[str, float]


def total_loss(cfg: LossConfig, mean, sigma, target, logits, epoch: int = 0,
               sigma0: float | None = None) -> LossValue:
    """Reconstruction term + signed latent KL + configured extras."""
    terms: dict[str, Tensor] = {}
    if cfg.kind == "fixed":
        terms["L_y"] = nll_fixed(mean, target, cfg.fixed_sigma2)
    elif cfg.kind == "lorentzian":
        terms["L_y"] = nll_lorentzian(mean, target, sigma)
    elif cfg.kind == "niw":
        terms["niw"] = niw_neg_log_posterior(mean, sigma, target, cfg.niw_prior())
    else:
        terms["L_y"] = nll_gaussian(mean, target, sigma)
    terms["L_KD"] = latent_kl(logits) * (cfg.kl_sign * cfg.kl_weight)
    if cfg.kind == "aniso_gauss_kl":
        if cfg.prior_sigma is None:
            raise ValueError("aniso_gauss_kl needs a prior schedule")
        terms["prior_kl"] = bayes_gaussian_kl(mean, sigma, target, cfg.prior_sigma)
    if cfg.convexify:
        if sigma0 is None:
            raise ValueError("convexification needs sigma0")
        w = convex_weight(epoch, cfg.convex_lambda0, cfg.convex_decay)
        terms["convex"] = convexify(mean, target, sigma, sigma0, w)
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    return LossValue(total, {k: float(v.data) for k, v in terms.items()})
