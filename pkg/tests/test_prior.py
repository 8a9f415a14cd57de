import math

import numpy as np
import pytest

from mapfold.prior import (BackboneChain, CalibrationError, CorrelatedPrior,
                           Schedule, build_prior, condition_number,
                           expected_rg_squared, forward_noise, unwhiten,
                           whiten)

from conftest import dense_decay_matrix


class TestMatrixConstruction:
    def test_b_zero_is_scaled_identity(self):
        prior = build_prior(1, fix_b=0.0, scale_a=1.3)
        assert np.allclose(prior.matrix, 1.3 * np.eye(4))
        assert prior.nu == 1.0

    def test_entries_match_bruteforce(self):
        prior = build_prior(3, fix_b=0.5, scale_a=1.0)
        oracle = dense_decay_matrix(12, 1.0, 0.5)
        assert np.max(np.abs(prior.matrix - oracle)) < 1e-14

    def test_lower_triangular_positive_diagonal(self):
        prior = build_prior(16)
        assert np.allclose(np.triu(prior.matrix, k=1), 0.0)
        assert np.all(np.diag(prior.matrix) > 0)

    def test_calibration_hits_gyration_target(self):
        n = 32
        prior = build_prior(n)
        target = 2.0 * n**0.4
        got = math.sqrt(expected_rg_squared(prior.a, prior.b, prior.dim))
        assert abs(got - target) < 1e-8 * target

    def test_calibration_failure_raises(self):
        # a single residue cannot reach the scaling target at the default scale
        with pytest.raises(CalibrationError):
            build_prior(1)

    def test_closed_form_rg_matches_monte_carlo(self, rng):
        n_atoms = 24
        a, b = 1.2, 0.8
        R = dense_decay_matrix(n_atoms, a, b)
        draws = 20000
        z = rng.standard_normal((draws, n_atoms, 3))
        x = np.einsum("ij,njc->nic", R, z)
        centered = x - x.mean(axis=1, keepdims=True)
        rg2 = np.mean(np.sum(centered**2, axis=(1, 2)) / n_atoms)
        se = np.std(np.sum(centered**2, axis=(1, 2)) / n_atoms) / math.sqrt(draws)
        assert abs(rg2 - expected_rg_squared(a, b, n_atoms)) < 3 * se

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            build_prior(0)
        with pytest.raises(ValueError):
            build_prior(4, radius_coeff=-1.0)
        with pytest.raises(ValueError):
            build_prior(4, radius_exponent=1.5)
        with pytest.raises(ValueError):
            build_prior(4, fix_b=1.0)


class TestWhitening:
    def test_zero_maps_to_zero(self, prior8):
        z = whiten(prior8, np.zeros((prior8.dim, 3)))
        assert np.all(z == 0.0)

    def test_basis_column_inverts(self, prior8):
        e = np.zeros((prior8.dim, 3))
        e[5] = 1.0
        x = prior8.matrix @ e
        assert np.max(np.abs(whiten(prior8, x) - e)) < 1e-9

    def test_whiten_matches_dense_inverse(self, prior8, rng):
        x = rng.standard_normal((prior8.dim, 3))
        oracle = np.linalg.inv(prior8.matrix) @ x
        assert np.max(np.abs(whiten(prior8, x) - oracle)) < 1e-9

    def test_unwhiten_matches_dense_matmul(self, prior8, rng):
        z = rng.standard_normal((prior8.dim, 3))
        oracle = prior8.matrix @ z
        assert np.max(np.abs(unwhiten(prior8, z) - oracle)) < 1e-12

    @pytest.mark.parametrize("n", [4, 32, 128, 256])
    def test_roundtrip(self, n, rng):
        prior = build_prior(n)
        z = rng.standard_normal((prior.dim, 3))
        assert np.max(np.abs(whiten(prior, unwhiten(prior, z)) - z)) < 1e-9
        x = rng.standard_normal((prior.dim, 3)) * 10.0
        assert np.max(np.abs(unwhiten(prior, whiten(prior, x)) - x)) < 1e-9

    def test_shape_and_finiteness_checks(self, prior8):
        with pytest.raises(ValueError):
            whiten(prior8, np.zeros((3, 3)))
        bad = np.zeros((prior8.dim, 3))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            whiten(prior8, bad)


class TestForwardNoise:
    def test_t_zero_returns_input(self, prior8, rng):
        sched = Schedule()
        x0 = rng.standard_normal((prior8.dim, 3))
        assert np.array_equal(forward_noise(prior8, sched, x0, 0.0, 1), x0)

    def test_mean_at_t_one(self, prior8, rng):
        sched = Schedule()
        x0 = 5.0 * rng.standard_normal((prior8.dim, 3))
        draws = 10000
        gen = np.random.default_rng(7)
        acc = np.zeros_like(x0)
        acc2 = np.zeros_like(x0)
        for _ in range(draws):
            s = forward_noise(prior8, sched, x0, 1.0, gen)
            acc += s
            acc2 += s * s
        mean = acc / draws
        se = np.sqrt((acc2 / draws - mean**2) / draws)
        assert np.all(np.abs(mean - sched.alpha(1.0) * x0) < 3 * se + 1e-12)

    def test_covariance_matches(self, rng):
        prior = build_prior(4)
        sched = Schedule()
        t = 0.5
        x0 = rng.standard_normal((prior.dim, 3))
        draws = 20000
        gen = np.random.default_rng(11)
        samples = np.stack([forward_noise(prior, sched, x0, t, gen)
                            for _ in range(draws)])
        flat = samples.transpose(0, 2, 1).reshape(-1, prior.dim)  # columns iid
        emp = np.cov(flat, rowvar=False)
        expected = sched.sigma(t) ** 2 * prior.covariance()
        rel = np.linalg.norm(emp - expected) / np.linalg.norm(expected)
        assert rel < 0.05

    def test_t_out_of_range(self, prior8):
        with pytest.raises(ValueError):
            forward_noise(prior8, Schedule(), np.zeros((prior8.dim, 3)), 1.5, 0)


class TestConditionNumber:
    def test_identity_scaling(self):
        prior = build_prior(2, fix_b=0.0)
        assert condition_number(prior) == pytest.approx(1.0)

    def test_matches_dense_svd(self):
        prior = build_prior(3, fix_b=0.5, scale_a=1.0)
        s = np.linalg.svd(dense_decay_matrix(12, 1.0, 0.5), compute_uv=False)
        assert condition_number(prior) == pytest.approx(s[0] / s[-1], rel=1e-8)

    def test_exceeds_hundred_at_n100(self):
        assert condition_number(build_prior(100)) > 100.0

    def test_nondecreasing_in_chain_length(self):
        values = [condition_number(build_prior(n)) for n in (10, 50, 100, 200)]
        assert all(a <= b for a, b in zip(values, values[1:]))


class TestSchedule:
    def test_endpoints(self):
        sched = Schedule()
        assert sched.alpha(0.0) == 1.0
        assert sched.sigma(0.0) == 0.0

    def test_identity_alpha2_plus_sigma2(self):
        sched = Schedule()
        for t in np.linspace(0.0, 1.0, 1000):
            assert abs(sched.alpha(t) ** 2 + sched.sigma(t) ** 2 - 1.0) < 1e-12

    def test_alpha_strictly_decreasing(self):
        sched = Schedule()
        ts = np.linspace(0.0, 1.0, 500)
        alphas = [sched.alpha(t) for t in ts]
        assert all(a > b for a, b in zip(alphas, alphas[1:]))

    def test_step_mappings(self):
        lin = Schedule("linear_time", 1000)
        assert lin.time_of_step(0) == 1.0
        assert lin.time_of_step(1000) == 0.0
        assert lin.time_of_step(250) == pytest.approx(0.75)
        sq = Schedule("sqrt_time", 1000)
        assert sq.time_of_step(0) == 1.0
        assert sq.time_of_step(1000) == 0.0
        assert sq.time_of_step(250) == pytest.approx(0.5)

    def test_validation(self):
        with pytest.raises(ValueError):
            Schedule("bogus")
        with pytest.raises(ValueError):
            Schedule(total_steps=0)
        with pytest.raises(ValueError):
            Schedule(beta_min=0.0)


class TestBackboneChain:
    def test_row_count_enforced(self):
        with pytest.raises(ValueError):
            BackboneChain(2, np.zeros((4, 3)), np.ones(4, bool))

    def test_mask_length_enforced(self):
        with pytest.raises(ValueError):
            BackboneChain(1, np.zeros((4, 3)), np.ones(3, bool))

    def test_finite_enforced(self):
        coords = np.zeros((4, 3))
        coords[0, 0] = np.inf
        with pytest.raises(ValueError):
            BackboneChain(1, coords, np.ones(4, bool))

    def test_ca_rows(self):
        chain = BackboneChain(3, np.zeros((12, 3)), np.ones(12, bool))
        assert chain.ca_rows().tolist() == [1, 5, 9]
