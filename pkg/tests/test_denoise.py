import math

import numpy as np
import pytest
from scipy.special import logsumexp

from mapfold.denoise import (GaussianLibraryDenoiser, OracleDenoiser,
                             jvp_finite_difference, oracle_denoise)
from mapfold.prior import Schedule, build_prior, unwhiten, whiten


@pytest.fixture
def setup(rng):
    prior = build_prior(4)
    sched = Schedule()
    mus = np.stack([unwhiten(prior, rng.standard_normal((prior.dim, 3)))
                    for _ in range(2)])
    return prior, sched, mus


class TestOracleDenoiser:
    def test_blend_one_returns_target(self, prior8, rng):
        sched = Schedule()
        target = rng.standard_normal((prior8.dim, 3))
        den = OracleDenoiser(target, 1.0, sched)
        for t in (0.0, 0.3, 1.0):
            assert np.array_equal(den.denoise(rng.standard_normal(target.shape), t),
                                  target)

    def test_blend_zero_t_zero_is_identity(self, prior8, rng):
        sched = Schedule()
        x = rng.standard_normal((prior8.dim, 3))
        den = OracleDenoiser(np.zeros_like(x), 0.0, sched)
        assert np.array_equal(den.denoise(x, 0.0), x)

    def test_half_blend_midpoint(self, prior8, rng):
        sched = Schedule()
        target = rng.standard_normal((prior8.dim, 3))
        x = rng.standard_normal(target.shape)
        out = oracle_denoise(target, 0.5, x, 0.5, sched)
        expected = 0.5 * target + 0.5 * (x / sched.alpha(0.5))
        assert np.max(np.abs(out - expected)) == 0.0


class TestGaussianLibraryDenoiser:
    def test_point_mass_returns_reference(self, setup, rng):
        prior, sched, mus = setup
        den = GaussianLibraryDenoiser(prior, sched, mus[0], spread=0.0)
        for t in (0.0, 0.4, 1.0):
            out = den.denoise(rng.standard_normal((prior.dim, 3)), t)
            assert np.max(np.abs(out - mus[0])) < 1e-9

    def test_no_noise_returns_observation(self, setup, rng):
        prior, sched, mus = setup
        den = GaussianLibraryDenoiser(prior, sched, mus[0], spread=0.8)
        x = rng.standard_normal((prior.dim, 3))
        assert np.max(np.abs(den.denoise(x, 0.0) - x)) < 1e-8

    def test_monte_carlo_posterior_mean(self, setup):
        prior, sched, mus = setup
        spread = 0.4
        den = GaussianLibraryDenoiser(prior, sched, mus, weights=[0.3, 0.7],
                                      spread=spread)
        t = 0.5
        alpha, sigma = sched.alpha(t), sched.sigma(t)
        gen = np.random.default_rng(77)
        ms = den.ms
        z0 = mus[0] * 0.0  # build z_t near a mixture draw
        comp = gen.choice(2, p=den.weights)
        z0 = ms[comp] + spread * gen.standard_normal(ms[comp].shape)
        z_t = alpha * z0 + sigma * gen.standard_normal(z0.shape)

        draws = 100000
        picks = gen.choice(2, size=draws, p=den.weights)
        samples = ms[picks] + spread * gen.standard_normal((draws,) + z0.shape)
        log_w = -np.sum((z_t[None] - alpha * samples) ** 2, axis=(1, 2)) \
            / (2.0 * sigma**2)
        log_w -= logsumexp(log_w)
        w = np.exp(log_w)
        mc_mean = np.einsum("n,nij->ij", w, samples)
        dev = samples - mc_mean[None]
        se = np.sqrt(np.einsum("n,nij->ij", w**2, dev**2))

        analytic = whiten(prior, den.denoise(unwhiten(prior, z_t), t))
        assert np.all(np.abs(analytic - mc_mean) <= 3.0 * se + 1e-9)

    @pytest.mark.parametrize("t", [0.2, 0.5, 0.8])
    def test_score_matches_log_marginal_gradient(self, setup, rng, t):
        # score implied by the posterior mean vs finite differences of the
        # closed-form log-marginal of the noised mixture
        prior, sched, mus = setup
        spread = 0.5
        den = GaussianLibraryDenoiser(prior, sched, mus, spread=spread)
        alpha, sigma = sched.alpha(t), sched.sigma(t)
        tau2 = (alpha * spread) ** 2 + sigma**2
        rinv = np.linalg.inv(prior.matrix)

        def log_marginal(x):
            z = rinv @ x
            parts = [math.log(w) - np.sum((z - alpha * m) ** 2) / (2 * tau2)
                     for w, m in zip(den.weights, den.ms)]
            return float(logsumexp(parts))

        x = unwhiten(prior, alpha * den.ms[0]
                     + math.sqrt(tau2) * rng.standard_normal((prior.dim, 3)))
        xhat = den.denoise(x, t)
        cov_inv = np.linalg.inv(prior.covariance())
        score = cov_inv @ (alpha * xhat - x) / (1.0 - alpha**2)

        fd = np.zeros_like(score)
        eps = 1e-6
        for i in range(prior.dim):
            for c in range(3):
                xp, xm = x.copy(), x.copy()
                xp[i, c] += eps
                xm[i, c] -= eps
                fd[i, c] = (log_marginal(xp) - log_marginal(xm)) / (2 * eps)
        rel = np.linalg.norm(score - fd) / np.linalg.norm(fd)
        assert rel < 1e-4

    def test_column_permutation_equivariance(self, setup, rng):
        prior, sched, mus = setup
        den = GaussianLibraryDenoiser(prior, sched, mus, spread=0.3)
        x = rng.standard_normal((prior.dim, 3))
        perm = [2, 0, 1]
        den_p = GaussianLibraryDenoiser(prior, sched, mus[:, :, perm], spread=0.3)
        out = den.denoise(x, 0.4)
        out_p = den_p.denoise(x[:, perm], 0.4)
        assert np.max(np.abs(out[:, perm] - out_p)) < 1e-10

    def test_analytic_jvp_matches_finite_difference(self, setup, rng):
        prior, sched, mus = setup
        den = GaussianLibraryDenoiser(prior, sched, mus, spread=0.5)
        for t in (0.2, 0.6):
            x = unwhiten(prior, rng.standard_normal((prior.dim, 3)))
            v = rng.standard_normal(x.shape)
            analytic = den.jvp(x, t, v)
            numeric = jvp_finite_difference(den, x, t, v)
            rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
            assert rel < 1e-4

    def test_shape_preserved_and_finite(self, setup, rng):
        prior, sched, mus = setup
        den = GaussianLibraryDenoiser(prior, sched, mus, spread=0.2)
        x = 1e6 * rng.standard_normal((prior.dim, 3))
        out = den.denoise(x, 0.9)
        assert out.shape == x.shape
        assert np.all(np.isfinite(out))

    def test_far_iterate_collapses_to_nearest(self, setup):
        # responsibilities underflow: falls back to the closest reference
        prior, sched, mus = setup
        den = GaussianLibraryDenoiser(prior, sched, mus, spread=0.01)
        x = unwhiten(prior, 1e8 * np.ones((prior.dim, 3))
                     + whiten(prior, mus[1]))
        out = den.denoise(x, 0.001)
        assert np.all(np.isfinite(out))

    def test_validation(self, setup):
        prior, sched, mus = setup
        with pytest.raises(ValueError):
            GaussianLibraryDenoiser(prior, sched, mus, weights=[1.0, -1.0])
        with pytest.raises(ValueError):
            GaussianLibraryDenoiser(prior, sched, mus, spread=-0.1)
        with pytest.raises(ValueError):
            GaussianLibraryDenoiser(prior, sched, np.zeros((2, 5, 3)))
        den = GaussianLibraryDenoiser(prior, sched, mus)
        with pytest.raises(ValueError):
            den.denoise(np.zeros((prior.dim, 3)), 1.2)
