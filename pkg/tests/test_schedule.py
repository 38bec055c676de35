"""Noise schedule construction and the single-step noising identity."""

from __future__ import annotations

import numpy as np
import pytest

from semfl.errors import InvalidInputError
from semfl.schedule import NoiseSchedule, add_noise, scaled_linear_schedule


class TestScheduleConstruction:
    def test_default_shape_and_endpoints(self):
        sched = scaled_linear_schedule()
        assert sched.num_timesteps == 1000
        np.testing.assert_allclose(sched.beta[0], 0.00085, rtol=1e-12)
        np.testing.assert_allclose(sched.beta[-1], 0.012, rtol=1e-12)

    def test_alpha_bar_strictly_decreasing_in_unit_interval(self):
        sched = scaled_linear_schedule()
        assert (np.diff(sched.alpha_bar) < 0).all()
        assert (sched.alpha_bar > 0).all() and (sched.alpha_bar < 1).all()

    def test_invalid_betas(self):
        with pytest.raises(InvalidInputError):
            NoiseSchedule(beta=np.array([0.5, 1.5]))
        with pytest.raises(InvalidInputError):
            NoiseSchedule(beta=np.array([]))
        with pytest.raises(InvalidInputError):
            scaled_linear_schedule(num_timesteps=0)

    def test_content_hash_stable(self):
        assert scaled_linear_schedule().content_hash() == \
            scaled_linear_schedule().content_hash()


class TestAddNoise:
    def test_zero_noise_is_pure_scaling(self):
        sched = scaled_linear_schedule()
        latent = np.arange(12, dtype=np.float64).reshape(3, 2, 2)
        out = add_noise(latent, 150, sched, noise=np.zeros_like(latent))
        np.testing.assert_array_equal(out, np.sqrt(sched.alpha_bar[150]) * latent)

    def test_forced_noise_algebraic_identity(self):
        # || l_t - sqrt(abar)*l || must equal sqrt(1 - abar) * ||eps|| exactly.
        sched = scaled_linear_schedule()
        gen = np.random.default_rng(7)
        latent = gen.standard_normal((4, 4, 4))
        eps = gen.standard_normal((4, 4, 4))
        out = add_noise(latent, 150, sched, noise=eps)
        a = sched.alpha_bar[150]
        np.testing.assert_allclose(np.linalg.norm(out - np.sqrt(a) * latent),
                                   np.sqrt(1 - a) * np.linalg.norm(eps),
                                   rtol=1e-12)

    def test_timestep_bounds(self):
        sched = scaled_linear_schedule()
        latent = np.ones((2, 2))
        for t in (0, 1000, -5):
            with pytest.raises(InvalidInputError):
                add_noise(latent, t, sched)

    def test_noise_shape_mismatch(self):
        sched = scaled_linear_schedule()
        with pytest.raises(InvalidInputError):
            add_noise(np.ones((2, 2)), 150, sched, noise=np.ones(3))

    def test_seed_determinism(self):
        sched = scaled_linear_schedule()
        latent = np.full((3, 3), 0.5)
        a = add_noise(latent, 150, sched, seed=42)
        b = add_noise(latent, 150, sched, seed=42)
        c = add_noise(latent, 150, sched, seed=43)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_monte_carlo_moments_at_t150(self):
        # Sample mean -> sqrt(abar)*l and sample variance -> (1 - abar),
        # each within 4 standard errors over 10,000 seeded draws.
        sched = scaled_linear_schedule()
        t = 150
        a = sched.alpha_bar[t]
        latent = np.random.default_rng(3).standard_normal((4, 2, 2))
        n = 10_000
        draws = np.stack([add_noise(latent, t, sched, seed=s) for s in range(n)])
        mean = draws.mean(axis=0)
        var = draws.var(axis=0, ddof=1)
        se_mean = np.sqrt((1 - a) / n)
        se_var = (1 - a) * np.sqrt(2.0 / (n - 1))
        assert np.abs(mean - np.sqrt(a) * latent).max() < 4 * se_mean
        assert np.abs(var - (1 - a)).max() < 4 * se_var
