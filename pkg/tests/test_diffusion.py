"""Variance schedule, forward noising, DDIM inversion, and predictors."""

import math

import numpy as np
import pytest

from bootsplat.diffusion import (BlurSharpenHeuristic, DiffusionSchedule,
                                 ExactEpsOracle, PredictorFailure,
                                 RegenRequest, ZeroPredictor, ddim_step,
                                 forward_noise, make_schedule, regenerate,
                                 sampler_timesteps, simple_loss,
                                 strength_to_start)


@pytest.fixture(scope="module")
def schedule():
    return make_schedule()


class TestStrengthToStart:
    def test_tenth_of_thousand(self):
        assert strength_to_start(0.1, 1000) == 100

    def test_zero_is_identity_step(self):
        assert strength_to_start(0.0, 1000) == 0

    def test_full_strength(self):
        assert strength_to_start(1.0, 1000) == 1000

    @pytest.mark.parametrize("s_r,expected", [(0.01, 10), (0.05, 50),
                                              (0.15, 150), (0.3, 300)])
    def test_proportional(self, s_r, expected):
        assert strength_to_start(s_r, 1000) == expected

    def test_rounds_to_nearest(self):
        assert strength_to_start(0.0504, 1000) == 50
        assert strength_to_start(0.0506, 1000) == 51

    @pytest.mark.parametrize("bad", [-0.1, 1.1, 2.0])
    def test_out_of_range_rejected(self, bad):
        with pytest.raises(ValueError):
            strength_to_start(bad, 1000)


class TestSchedule:
    def test_alpha_bars_match_cumulative_product(self, schedule):
        betas = np.linspace(1e-4, 2e-2, 1000)
        for t in (0, 1, 2, 57, 1000):
            expected = math.prod(1.0 - b for b in betas[:t])
            assert schedule.alpha_bars[t] == pytest.approx(expected, rel=1e-12)

    def test_alpha_bars_shape_and_endpoints(self, schedule):
        assert schedule.alpha_bars.shape == (1001,)
        assert schedule.alpha_bars[0] == 1.0
        assert np.all(np.diff(schedule.alpha_bars) < 0.0)

    def test_rejects_decreasing_betas(self):
        betas = np.linspace(2e-2, 1e-4, 10)
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        with pytest.raises(ValueError):
            DiffusionSchedule(betas=betas, alpha_bars=alpha_bars,
                              sampler_steps=5)

    def test_rejects_alpha_bar_not_starting_at_one(self):
        betas = np.linspace(1e-4, 2e-2, 10)
        alpha_bars = np.concatenate([[0.999], np.cumprod(1.0 - betas)])
        with pytest.raises(ValueError):
            DiffusionSchedule(betas=betas, alpha_bars=alpha_bars,
                              sampler_steps=5)

    def test_rejects_bad_sampler_steps(self):
        with pytest.raises(ValueError):
            make_schedule(num_train_steps=10, sampler_steps=0)
        with pytest.raises(ValueError):
            make_schedule(num_train_steps=10, sampler_steps=11)

    def test_rejects_negative_eta(self):
        with pytest.raises(ValueError):
            make_schedule(eta=-0.5)

    def test_rejects_beta_outside_unit_interval(self):
        betas = np.linspace(0.0, 2e-2, 10)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        with pytest.raises(ValueError):
            DiffusionSchedule(betas=betas, alpha_bars=ab, sampler_steps=5)


class TestForwardNoise:
    def test_t_zero_is_bitwise_identity(self, schedule, rng):
        x0 = rng.uniform(0.0, 1.0, size=(8, 8, 3))
        eps = rng.standard_normal((8, 8, 3))
        np.testing.assert_array_equal(forward_noise(x0, 0, eps, schedule), x0)

    def test_zero_noise_scales_by_sqrt_alpha_bar(self, schedule, rng):
        x0 = rng.uniform(0.0, 1.0, size=(6, 6))
        for t in (1, 100, 500, 1000):
            out = forward_noise(x0, t, np.zeros_like(x0), schedule)
            np.testing.assert_allclose(
                out, np.sqrt(schedule.alpha_bars[t]) * x0, rtol=1e-14)

    def test_monte_carlo_mean_and_variance(self, schedule):
        t = 500
        c = 0.3
        n = 200_000
        g = np.random.default_rng(42)
        x0 = np.full(n, c)
        samples = forward_noise(x0, t, g.standard_normal(n), schedule)
        ab = schedule.alpha_bars[t]
        assert samples.mean() == pytest.approx(np.sqrt(ab) * c, abs=4e-3)
        assert samples.var() == pytest.approx(1.0 - ab, rel=2e-2)


class TestDDIMStep:
    @pytest.mark.parametrize("t", [1, 100, 500, 1000])
    def test_single_step_exact_inversion(self, schedule, rng, t):
        x0 = rng.uniform(0.05, 0.95, size=(8, 8))
        eps = rng.standard_normal((8, 8))
        x_t = forward_noise(x0, t, eps, schedule)
        back = ddim_step(x_t, t, 0, eps, 0.0, schedule)
        np.testing.assert_allclose(back, x0, atol=1e-6)

    def test_multi_step_exact_inversion(self, schedule, rng):
        """Walking the sampler grid from t=100 to 0 with the true noise
        recovers the input."""
        x0 = rng.uniform(0.05, 0.95, size=(8, 8, 3))
        eps = rng.standard_normal(x0.shape)
        x = forward_noise(x0, 100, eps, schedule)
        steps = sampler_timesteps(100, 1000, 100)
        for t, t_prev in zip(steps[:-1], steps[1:]):
            x = ddim_step(x, t, t_prev, eps, 0.0, schedule)
        np.testing.assert_allclose(x, x0, atol=1e-5)

    def test_rejects_non_decreasing_step(self, schedule, rng):
        x = rng.uniform(size=(4, 4))
        with pytest.raises(ValueError):
            ddim_step(x, 10, 10, np.zeros_like(x), 0.0, schedule)

    def test_stochastic_step_requires_rng(self, schedule, rng):
        x = rng.uniform(size=(4, 4))
        with pytest.raises(ValueError):
            ddim_step(x, 10, 5, np.zeros_like(x), 0.5, schedule, rng=None)

    def test_stochastic_step_changes_with_rng(self, schedule, rng):
        x = rng.uniform(size=(4, 4))
        eps_hat = np.zeros_like(x)
        a = ddim_step(x, 100, 50, eps_hat, 1.0, schedule,
                      rng=np.random.default_rng(1))
        b = ddim_step(x, 100, 50, eps_hat, 1.0, schedule,
                      rng=np.random.default_rng(2))
        assert not np.array_equal(a, b)


class TestSamplerTimesteps:
    def test_zero_start_empty(self):
        assert sampler_timesteps(0, 1000, 100) == []

    def test_standard_grid(self):
        steps = sampler_timesteps(100, 1000, 100)
        assert steps == [100, 90, 80, 70, 60, 50, 40, 30, 20, 10, 0]

    def test_always_descending_to_zero(self):
        for start in (1, 7, 50, 150, 999):
            steps = sampler_timesteps(start, 1000, 100)
            assert steps[0] == start
            assert steps[-1] == 0
            assert all(a > b for a, b in zip(steps, steps[1:]))

    def test_step_count_proportional_to_start(self):
        assert len(sampler_timesteps(50, 1000, 100)) == 6    # 5 intervals
        assert len(sampler_timesteps(150, 1000, 100)) == 16  # 15 intervals

    def test_tiny_start_single_interval(self):
        assert sampler_timesteps(1, 1000, 100) == [1, 0]


class TestRegenRequest:
    def test_rejects_bad_strength(self, rng):
        with pytest.raises(ValueError):
            RegenRequest(image=rng.uniform(size=(4, 4)), strength=1.5)

    def test_rejects_bad_steps(self, rng):
        with pytest.raises(ValueError):
            RegenRequest(image=rng.uniform(size=(4, 4)), strength=0.1, steps=0)


class TestRegenerate:
    def test_zero_strength_bitwise_identity(self, schedule, rng):
        x0 = rng.uniform(0.0, 1.0, size=(12, 12, 3))
        out = regenerate(RegenRequest(image=x0, strength=0.0),
                         ZeroPredictor(), schedule)
        np.testing.assert_array_equal(out, x0)

    @pytest.mark.parametrize("s_r", [0.01, 0.05, 0.10, 0.15])
    def test_exact_noise_oracle_recovers_input(self, schedule, rng, s_r):
        x0 = rng.uniform(0.05, 0.95, size=(16, 16, 3))
        out = regenerate(RegenRequest(image=x0, strength=s_r, seed=5),
                         ExactEpsOracle(), schedule)
        assert np.max(np.abs(out - x0)) < 1e-4

    def test_deterministic_given_seed(self, schedule, rng):
        x0 = rng.uniform(0.0, 1.0, size=(10, 10))
        heur = BlurSharpenHeuristic(schedule)
        a = regenerate(RegenRequest(image=x0, strength=0.15, seed=9), heur,
                       schedule)
        b = regenerate(RegenRequest(image=x0, strength=0.15, seed=9), heur,
                       schedule)
        np.testing.assert_array_equal(a, b)

    def test_seed_changes_output(self, schedule, rng):
        x0 = rng.uniform(0.0, 1.0, size=(10, 10))
        heur = BlurSharpenHeuristic(schedule)
        a = regenerate(RegenRequest(image=x0, strength=0.15, seed=1), heur,
                       schedule)
        b = regenerate(RegenRequest(image=x0, strength=0.15, seed=2), heur,
                       schedule)
        assert not np.array_equal(a, b)

    def test_output_clamped_to_unit_range(self, schedule, rng):
        x0 = rng.uniform(0.0, 1.0, size=(10, 10))
        out = regenerate(RegenRequest(image=x0, strength=0.3, seed=0),
                         BlurSharpenHeuristic(schedule), schedule)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_heuristic_removes_checkerboard_corruption(self, schedule):
        n = 32
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        clean = 0.25 + 0.5 * (ii + jj) / (2 * (n - 1))
        corrupted = np.clip(clean + 0.2 * ((ii + jj) % 2 * 2 - 1), 0.0, 1.0)
        out = regenerate(RegenRequest(image=corrupted, strength=0.05, seed=3),
                         BlurSharpenHeuristic(schedule), schedule)
        err_in = np.sqrt(np.mean((corrupted - clean) ** 2))
        err_out = np.sqrt(np.mean((out - clean) ** 2))
        assert err_out < 0.95 * err_in

    def test_deviation_monotone_in_strength(self, schedule):
        """Across 20 images, a stronger pass moves the image further."""
        g = np.random.default_rng(11)
        heur = BlurSharpenHeuristic(schedule)
        low, high = [], []
        for k in range(20):
            base = np.clip(g.normal(0.5, 0.15, size=(24, 24)), 0.02, 0.98)
            for s_r, sink in ((0.05, low), (0.15, high)):
                out = regenerate(
                    RegenRequest(image=base, strength=s_r, seed=100 + k),
                    heur, schedule)
                sink.append(float(np.mean(np.abs(out - base))))
        low, high = np.array(low), np.array(high)
        assert high.mean() > low.mean()
        assert int((high > low).sum()) >= 19


class TestPredictors:
    def test_oracle_without_noise_fails(self, schedule, rng):
        with pytest.raises(PredictorFailure):
            ExactEpsOracle().predict(rng.uniform(size=(4, 4)), 100)

    def test_oracle_shape_mismatch_fails(self, schedule, rng):
        oracle = ExactEpsOracle()
        oracle.on_noise_injected(rng.standard_normal((4, 4)))
        with pytest.raises(PredictorFailure):
            oracle.predict(rng.uniform(size=(8, 8)), 100)

    def test_zero_predictor_returns_zeros(self, schedule, rng):
        x = rng.uniform(size=(5, 5))
        np.testing.assert_array_equal(ZeroPredictor().predict(x, 50),
                                      np.zeros_like(x))

    def test_heuristic_no_noise_at_t_zero(self, schedule, rng):
        x = rng.uniform(size=(5, 5))
        out = BlurSharpenHeuristic(schedule).predict(x, 0)
        np.testing.assert_array_equal(out, np.zeros_like(x))

    def test_heuristic_prediction_consistent_with_denoised(self, schedule, rng):
        """eps-hat must be exactly the noise whose removal yields the
        denoised estimate under the forward model."""
        heur = BlurSharpenHeuristic(schedule)
        x_t = rng.uniform(size=(8, 8))
        t = 120
        eps_hat = heur.predict(x_t, t)
        ab = schedule.alpha_bars[t]
        x0_est = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        np.testing.assert_allclose(x0_est, heur.denoised(x_t, t), atol=1e-10)


class TestSimpleLoss:
    def test_oracle_gives_zero(self, schedule, rng):
        x0 = rng.uniform(size=(6, 6))
        eps = rng.standard_normal((6, 6))
        assert simple_loss(x0, 200, eps, ExactEpsOracle(), schedule) == 0.0

    def test_zero_predictor_gives_noise_energy(self, schedule, rng):
        x0 = rng.uniform(size=(6, 6))
        eps = rng.standard_normal((6, 6))
        loss = simple_loss(x0, 200, eps, ZeroPredictor(), schedule)
        assert loss == pytest.approx(float(np.sum(eps ** 2)), rel=1e-12)

    def test_heuristic_loss_nonnegative(self, schedule, rng):
        x0 = rng.uniform(size=(6, 6))
        eps = rng.standard_normal((6, 6))
        loss = simple_loss(x0, 200, eps, BlurSharpenHeuristic(schedule),
                           schedule)
        assert loss >= 0.0
