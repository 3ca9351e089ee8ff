import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

import nriuq.autodiff as ad
from nriuq.autodiff import Tensor, grad
from nriuq.losses import (
    LossConfig,
    NIWParams,
    bayes_gaussian_kl,
    convex_weight,
    convexify,
    latent_kl,
    niw_neg_log_posterior,
    niw_update,
    nll_fixed,
    nll_gaussian,
    nll_lorentzian,
    total_loss,
)
from conftest import finite_difference, rel_err

SHAPE = (2, 3, 4, 4)


def batch(seed, m=4, shape=SHAPE):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=shape)
    target = rng.normal(size=shape)
    sigma = rng.uniform(0.2, 2.0, size=shape[:-1] + (m,))
    return pred, target, sigma


def spread(sigma):
    m = sigma.shape[-1]
    return sigma[..., [0, 0, 1, 1]] if m == 2 else np.broadcast_to(sigma, sigma.shape[:-1] + (4,))


class TestBruteForce:
    """Compare against explicit element loops."""

    @pytest.mark.parametrize("m", [1, 2, 4])
    def test_gaussian(self, m):
        pred, target, sigma = batch(0, m)
        s = spread(sigma)
        expected = 0.0
        for idx in np.ndindex(*SHAPE):
            r = pred[idx] - target[idx]
            expected += r * r / (2 * s[idx] ** 2) + 0.5 * np.log(s[idx] ** 2)
        assert nll_gaussian(pred, target, sigma).item() == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("m", [1, 2, 4])
    def test_lorentzian(self, m):
        pred, target, sigma = batch(1, m)
        s = spread(sigma)
        expected = 0.0
        for idx in np.ndindex(*SHAPE):
            r = pred[idx] - target[idx]
            expected += np.log1p(r * r / s[idx] ** 2) + np.log(s[idx])
        assert nll_lorentzian(pred, target, sigma).item() == pytest.approx(expected, rel=1e-12)

    def test_fixed(self):
        pred, target, _ = batch(2)
        expected = sum((pred[i] - target[i]) ** 2 for i in np.ndindex(*SHAPE)) / (2 * 5e-5)
        assert nll_fixed(pred, target).item() == pytest.approx(expected, rel=1e-12)

    def test_latent_kl(self):
        logits = np.random.default_rng(3).normal(size=(2, 6, 2, 2))
        expected = 0.0
        for idx in np.ndindex(*logits.shape[:-1]):
            q = np.exp(logits[idx]) / np.exp(logits[idx]).sum()
            expected += np.sum(q * np.log(q / 0.5))
        assert latent_kl(logits).item() == pytest.approx(expected, rel=1e-12)


class TestIdentities:
    def test_aniso_equals_iso(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            pred, target = rng.normal(size=(2, 5, 5, 4)), rng.normal(size=(2, 5, 5, 4))
            s1 = rng.uniform(0.01, 3.0, size=(2, 5, 5, 1))
            iso = nll_gaussian(pred, target, s1).item()
            aniso = nll_gaussian(pred, target, np.repeat(s1, 4, axis=-1)).item()
            semi = nll_gaussian(pred, target, np.repeat(s1, 2, axis=-1)).item()
            assert abs(iso - aniso) <= 1e-12 * max(1.0, abs(iso))
            assert abs(iso - semi) <= 1e-12 * max(1.0, abs(iso))

    def test_zero_at_perfect_unit(self):
        y = np.random.default_rng(5).normal(size=SHAPE)
        one = np.ones(SHAPE)
        assert nll_gaussian(y, y, one).item() == 0.0
        assert nll_lorentzian(y, y, one).item() == 0.0
        assert nll_fixed(y, y).item() == 0.0
        assert latent_kl(np.zeros((3, 6, 2, 2))).item() == pytest.approx(0.0, abs=1e-15)
        assert bayes_gaussian_kl(y, one[..., :1], y, np.ones(SHAPE[1])).item() == pytest.approx(0.0, abs=1e-13)

    def test_stationary_in_sigma(self):
        # d/ds [r^2/(2s^2) + log s] = 0 at s = |r|; for the Lorentzian also at g = |r|.
        r = np.array([0.3, -1.2, 2.0])
        pred = np.repeat(r[:, None], 4, axis=1)
        for fn in (nll_gaussian, nll_lorentzian):
            s = Tensor(np.abs(r)[:, None], requires_grad=True)
            (g,) = grad(fn(pred, np.zeros((3, 4)), s), [s])
            np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_translation_invariance(self):
        pred, target, sigma = batch(6)
        shift = np.array([0.3, -2.0, 1.1, 0.7])
        for fn in (nll_gaussian, nll_lorentzian):
            a = fn(pred, target, sigma).item()
            b = fn(pred + shift, target + shift, sigma).item()
            assert a == pytest.approx(b, rel=1e-12)

    def test_latent_kl_nonnegative(self):
        logits = np.random.default_rng(7).normal(scale=3, size=(50, 2, 2))
        assert latent_kl(logits).item() > 0

    def test_invalid_sigma(self):
        pred, target, sigma = batch(8)
        sigma[0, 0, 0, 0] = 0.0
        with pytest.raises(ValueError):
            nll_gaussian(pred, target, sigma)
        with pytest.raises(ValueError):
            nll_lorentzian(pred, target, -sigma)
        with pytest.raises(ad.ShapeError):
            nll_gaussian(pred, target, np.ones(SHAPE[:-1] + (3,)))
        with pytest.raises(ad.ShapeError):
            nll_gaussian(pred, target[..., :3], sigma)


class TestGaussianKL:
    def test_matches_quadrature(self):
        mu_p, s_p, mu_q, s_q = 0.3, 0.4, -0.2, 0.9
        p = stats.norm(mu_p, s_p)
        q = stats.norm(mu_q, s_q)
        quad, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), -10, 10)
        got = bayes_gaussian_kl(np.full((1, 1, 1, 4), mu_p), np.full((1, 1, 1, 4), s_p),
                                np.full((1, 1, 1, 4), mu_q), np.array([s_q])).item()
        assert got / 4 == pytest.approx(quad, rel=1e-8)

    def test_prior_per_step(self):
        pred, target, sigma = batch(9)
        prior = np.array([0.5, 1.0, 2.0])
        full = bayes_gaussian_kl(pred, sigma, target, prior).item()
        parts = sum(bayes_gaussian_kl(pred[:, t:t + 1], sigma[:, t:t + 1], target[:, t:t + 1], prior[t:t + 1]).item()
                    for t in range(3))
        assert full == pytest.approx(parts, rel=1e-12)
        with pytest.raises(ad.ShapeError):
            bayes_gaussian_kl(pred, sigma, target, np.ones(5))
        with pytest.raises(ValueError):
            bayes_gaussian_kl(pred, sigma, target, np.zeros(3))


class TestConvexify:
    def test_weight_decay(self):
        assert convex_weight(0, 2.0) == 2.0
        assert convex_weight(100, 1.0) == pytest.approx(0.99 ** 100)
        with pytest.raises(ValueError):
            convex_weight(0, -1.0)

    def test_value(self):
        pred, target, sigma = batch(10)
        expected = 0.5 * (np.sum((pred - target) ** 2) + np.sum((sigma - 0.1) ** 2))
        assert convexify(pred, target, sigma, 0.1, 0.5).item() == pytest.approx(expected, rel=1e-12)


class TestNIW:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_batch_equals_sequential(self, n, d, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(d, d))
        prior = NIWParams(rng.normal(size=d), rng.uniform(0.5, 3), a @ a.T + np.eye(d), d + rng.uniform(0, 4))
        x = rng.normal(size=(n, d)) * 2 + 1
        batch_post = niw_update(prior, x)
        seq = prior
        for row in x:
            seq = niw_update(seq, row[None])
        np.testing.assert_allclose(batch_post.mu, seq.mu, atol=1e-9, rtol=1e-9)
        np.testing.assert_allclose(batch_post.psi, seq.psi, atol=1e-9, rtol=1e-9)
        assert batch_post.kappa == pytest.approx(seq.kappa, abs=1e-9)
        assert batch_post.nu == pytest.approx(seq.nu, abs=1e-9)

    def test_empty_update(self):
        prior = NIWParams.default()
        post = niw_update(prior, np.zeros((0, 4)))
        assert post.kappa == prior.kappa and np.array_equal(post.psi, prior.psi)

    def test_matches_scipy_density(self):
        rng = np.random.default_rng(11)
        prior = NIWParams.default()
        target = rng.normal(scale=0.1, size=(2, 3, 4))
        pred = rng.normal(scale=0.1, size=(2, 3, 4))
        sigma = rng.uniform(0.05, 0.3, size=(2, 3, 4))
        post = niw_update(prior, target.reshape(-1, 4))
        expected = 0.0
        for idx in np.ndindex(2, 3):
            cov = np.diag(sigma[idx] ** 2)
            expected -= stats.multivariate_normal.logpdf(pred[idx], post.mu, cov / post.kappa)
            expected -= stats.invwishart.logpdf(cov, df=post.nu, scale=post.psi)
        got = niw_neg_log_posterior(pred, sigma, target, prior).item()
        assert got == pytest.approx(expected, rel=1e-10)

    def test_validation(self):
        with pytest.raises(ValueError):
            NIWParams(np.zeros(4), 1.0, np.eye(3), 6.0)
        with pytest.raises(ValueError):
            NIWParams(np.zeros(4), 0.0, np.eye(4), 6.0)
        with pytest.raises(ValueError):
            NIWParams(np.zeros(4), 1.0, np.eye(4), 2.5)
        pred, target, sigma = batch(12)
        sigma[..., 0] = 0.0
        with pytest.raises(ValueError, match="singular"):
            niw_neg_log_posterior(pred, sigma, target, NIWParams.default())


def _gradcheck(fn, *arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = grad(fn(*ts), ts)
    for t, a in zip(ts, analytic):
        num = finite_difference(lambda: float(fn(*[Tensor(x.data) for x in ts]).data), t.data)
        assert rel_err(a, num) < 1e-4


class TestGradients:
    def setup_method(self):
        self.pred, self.target, self.sigma = batch(13, shape=(2, 3, 2, 4))

    def test_gaussian(self):
        _gradcheck(lambda p, s: nll_gaussian(p, self.target, s), self.pred, self.sigma)

    def test_lorentzian(self):
        _gradcheck(lambda p, s: nll_lorentzian(p, self.target, s), self.pred, self.sigma)

    def test_fixed(self):
        _gradcheck(lambda p: nll_fixed(p, self.target, 0.5), self.pred)

    def test_latent_kl(self):
        _gradcheck(latent_kl, np.random.default_rng(1).normal(size=(2, 6, 2, 2)))

    def test_bayes_kl(self):
        _gradcheck(lambda p, s: bayes_gaussian_kl(p, s, self.target, np.array([0.5, 1.0, 1.5])),
                   self.pred, self.sigma)

    def test_convexify(self):
        _gradcheck(lambda p, s: convexify(p, self.target, s, 0.3, 0.7), self.pred, self.sigma)

    def test_niw(self):
        _gradcheck(lambda p, s: niw_neg_log_posterior(p, s, self.target, NIWParams.default()) * 1e-3,
                   self.pred * 0.1, self.sigma * 0.1)


class TestTotalLoss:
    def test_components(self):
        pred, target, sigma = batch(14)
        logits = np.random.default_rng(0).normal(size=(2, 20, 2, 2))
        cfg = LossConfig(kind="aniso_gauss_kl", convexify=True, prior_sigma=np.array([0.5, 1.0, 1.5]))
        lv = total_loss(cfg, pred, sigma, target, logits, epoch=3, sigma0=0.2)
        assert set(lv.components) == {"L_y", "L_KD", "prior_kl", "convex"}
        assert lv.total.item() == pytest.approx(sum(lv.components.values()), rel=1e-12)
        assert lv.components["convex"] == pytest.approx(convexify(pred, target, sigma, 0.2, 0.99 ** 3).item())

    def test_kl_sign(self):
        pred, target, sigma = batch(15)
        logits = np.random.default_rng(0).normal(size=(2, 20, 2, 2))
        plus = total_loss(LossConfig(kind="iso_gauss"), pred, sigma[..., :1], target, logits)
        minus = total_loss(LossConfig(kind="iso_gauss", kl_sign=-1.0), pred, sigma[..., :1], target, logits)
        assert plus.components["L_KD"] == -minus.components["L_KD"] > 0

    def test_niw_kind(self):
        pred, target, sigma = batch(16)
        lv = total_loss(LossConfig(kind="niw"), pred, sigma, target, np.zeros((2, 20, 2, 2)))
        assert set(lv.components) == {"niw", "L_KD"}

    def test_config_checks(self):
        with pytest.raises(ValueError):
            LossConfig(kind="huber")
        with pytest.raises(ValueError):
            LossConfig(kl_sign=0.5)
        LossConfig(kind="lorentzian").check_sigma_mode("anisotropic")
        with pytest.raises(ValueError):
            LossConfig(kind="lorentzian").check_sigma_mode("fixed")
        with pytest.raises(ValueError):
            LossConfig(kind="aniso_gauss").check_sigma_mode("isotropic")
        with pytest.raises(ValueError):
            total_loss(LossConfig(kind="aniso_gauss_kl"), *batch(1)[:1], np.ones(SHAPE), batch(1)[1],
                       np.zeros((2, 20, 2, 2)))
