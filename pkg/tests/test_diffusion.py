import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rateldm.diffusion import (
    NoiseSchedule,
    SamplerConfig,
    build_schedule,
    cfg_combine,
    ddim_sample,
    ddim_timesteps,
    forward_marginal,
    training_loss,
    x0_clip,
)


class TestSchedule:
    def test_first_alpha_bar(self):
        s = build_schedule(1000, 1e-4, 0.02)
        assert float(s.alpha_bar[0]) == pytest.approx(0.9999, abs=1e-12)

    def test_final_alpha_bar_product_oracle(self):
        s = build_schedule(1000, 1e-4, 0.02)
        # independent brute-force product
        betas = np.linspace(1e-4, 0.02, 1000)
        prod = 1.0
        for b in betas:
            prod *= 1.0 - b
        assert abs(float(s.alpha_bar[-1]) - prod) < 1e-12
        assert float(s.alpha_bar[-1]) < 0.01

    def test_no_noise_limit(self):
        s = build_schedule(10, 1e-12, 1e-12)
        assert abs(float(s.alpha_bar[-1]) - 1.0) < 1e-10

    def test_beta_nondecreasing_and_bounded(self):
        s = build_schedule(100, 1e-4, 0.02)
        assert float(s.beta[0]) > 0 and float(s.beta[-1]) < 1
        assert torch.all(s.beta[1:] >= s.beta[:-1])

    def test_alpha_bar_recurrence(self):
        s = build_schedule(200, 1e-3, 0.05)
        assert torch.all(s.alpha_bar[1:] < s.alpha_bar[:-1])
        recur = s.alpha_bar[:-1] * s.alpha[1:]
        assert torch.allclose(recur, s.alpha_bar[1:], atol=1e-15, rtol=0)

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            build_schedule(10, 0.0, 0.02)
        with pytest.raises(ValueError):
            build_schedule(10, 0.03, 0.02)
        with pytest.raises(ValueError):
            build_schedule(0, 1e-4, 0.02)


class TestForwardMarginal:
    def test_no_noise_limit_returns_z0(self):
        s = build_schedule(10, 1e-12, 1e-12)
        z0 = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(0))
        eps = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(1))
        z_t = forward_marginal(z0, 10, s, eps)
        assert torch.allclose(z_t, z0, atol=1e-5)

    def test_full_noise_limit_returns_eps(self):
        s = build_schedule(400, 0.5, 0.999)  # alpha_bar collapses to ~0
        z0 = torch.randn(1, 2, 4, 4, generator=torch.Generator().manual_seed(0))
        eps = torch.randn(1, 2, 4, 4, generator=torch.Generator().manual_seed(1))
        z_t = forward_marginal(z0, 400, s, eps)
        assert torch.allclose(z_t, eps, atol=1e-5)

    def test_stepwise_matches_closed_form_moments(self):
        # simulate Eq.-style stepwise chain for T=5 and compare moments
        T, n = 5, 10000
        s = build_schedule(T, 0.1, 0.5)
        z0 = 1.7
        rng = np.random.default_rng(123)
        z = np.full(n, z0)
        for t in range(T):
            beta = float(s.beta[t])
            z = np.sqrt(1.0 - beta) * z + np.sqrt(beta) * rng.standard_normal(n)
        abar = float(s.alpha_bar[-1])
        mean_true = np.sqrt(abar) * z0
        var_true = 1.0 - abar
        se_mean = np.sqrt(var_true / n)
        se_var = var_true * np.sqrt(2.0 / (n - 1))
        assert abs(z.mean() - mean_true) < 3 * se_mean
        assert abs(z.var() - var_true) < 3 * se_var
        # and the closed-form sampler agrees with the same moments
        g = torch.Generator().manual_seed(7)
        eps = torch.randn(n, dtype=torch.float64, generator=g)
        closed = forward_marginal(torch.full((n,), z0, dtype=torch.float64), T, s, eps)
        assert abs(float(closed.mean()) - mean_true) < 3 * se_mean
        assert abs(float(closed.var()) - var_true) < 3 * se_var

    def test_out_of_range_t(self):
        s = build_schedule(10, 1e-4, 0.02)
        z = torch.zeros(1, 1, 2, 2)
        with pytest.raises(ValueError):
            forward_marginal(z, 0, s, z)
        with pytest.raises(ValueError):
            forward_marginal(z, 11, s, z)

    def test_shape_mismatch(self):
        s = build_schedule(10, 1e-4, 0.02)
        with pytest.raises(ValueError):
            forward_marginal(torch.zeros(2, 2), 5, s, torch.zeros(3, 2))


class TestTrainingLoss:
    def setup_method(self):
        self.s = build_schedule(100, 1e-4, 0.02)
        self.z0 = torch.randn(8, 2, 4, 4, generator=torch.Generator().manual_seed(0))

    def test_oracle_denoiser_gives_zero(self):
        drawn = {}

        def oracle(z_t, t, cond):
            return drawn["eps"]

        g = torch.Generator().manual_seed(5)
        noise = torch.randn(self.z0.shape, generator=g)
        drawn["eps"] = noise
        loss = training_loss(oracle, self.z0, None, 50, self.s, noise=noise)
        assert float(loss) == 0.0

    def test_zero_denoiser_expectation(self):
        def zero(z_t, t, cond):
            return torch.zeros_like(z_t)

        losses = [
            float(training_loss(zero, self.z0, None, 50, self.s,
                                generator=torch.Generator().manual_seed(i)))
            for i in range(40)
        ]
        n = 40 * self.z0.numel()
        # E[eps^2] = 1, Var[eps^2] = 2, so SE = sqrt(2/n)
        assert abs(np.mean(losses) - 1.0) < 3 * np.sqrt(2.0 / n)

    def test_nonnegative(self):
        def noisy(z_t, t, cond):
            return torch.randn(z_t.shape, generator=torch.Generator().manual_seed(9))

        for i in range(5):
            loss = training_loss(noisy, self.z0, None, i * 20 + 1, self.s,
                                 generator=torch.Generator().manual_seed(i))
            assert float(loss) >= 0.0

    def test_non_finite_denoiser_error(self):
        def bad(z_t, t, cond):
            return torch.full_like(z_t, float("nan"))

        with pytest.raises(FloatingPointError):
            training_loss(bad, self.z0, None, 10, self.s,
                          generator=torch.Generator().manual_seed(0))


class TestCfgCombine:
    def test_w1_is_conditional(self):
        a = torch.randn(3, 4, generator=torch.Generator().manual_seed(0))
        b = torch.randn(3, 4, generator=torch.Generator().manual_seed(1))
        assert torch.equal(cfg_combine(a, b, 1.0), a)

    def test_w0_is_null(self):
        a = torch.randn(3, 4, generator=torch.Generator().manual_seed(0))
        b = torch.randn(3, 4, generator=torch.Generator().manual_seed(1))
        assert torch.equal(cfg_combine(a, b, 0.0), b)

    def test_scalar_probe(self):
        a = torch.tensor([1.0])
        b = torch.tensor([0.5])
        assert float(cfg_combine(a, b, 3.0)) == pytest.approx(2.0, abs=1e-12)

    def test_equal_inputs_identity(self):
        a = torch.randn(5, generator=torch.Generator().manual_seed(2))
        for w in (0.0, 0.5, 1.0, 3.0, 7.5):
            assert torch.allclose(cfg_combine(a, a.clone(), w), a, atol=1e-6)

    def test_algebraic_equivalence_to_residual_form(self):
        g = torch.Generator().manual_seed(3)
        a = torch.randn(64, dtype=torch.float64, generator=g)
        b = torch.randn(64, dtype=torch.float64, generator=g)
        for w in (0.0, 1.0, 3.0, 10.0):
            lhs = cfg_combine(a, b, w)
            rhs = b + w * (a - b)
            assert torch.all((lhs - rhs).abs() < 1e-12)

    def test_linear_in_w_along_difference(self):
        g = torch.Generator().manual_seed(4)
        a = torch.randn(16, dtype=torch.float64, generator=g)
        b = torch.randn(16, dtype=torch.float64, generator=g)
        d1 = cfg_combine(a, b, 5.0) - cfg_combine(a, b, 2.0)
        assert torch.allclose(d1, 3.0 * (a - b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_combine(torch.zeros(2), torch.zeros(3), 1.0)


class TestX0Clip:
    def test_in_range_unchanged(self):
        x = torch.linspace(-3.9, 3.9, 11)
        assert torch.equal(x0_clip(x, 4.0), x)

    def test_clamps(self):
        assert float(x0_clip(torch.tensor([40.0]), 4.0)) == 4.0
        assert float(x0_clip(torch.tensor([-40.0]), 4.0)) == -4.0

    @given(st.floats(-100, 100), st.floats(0.1, 10))
    @settings(max_examples=30, deadline=None)
    def test_idempotent(self, value, bound):
        x = torch.tensor([value])
        once = x0_clip(x, bound)
        assert torch.equal(x0_clip(once, bound), once)

    def test_bad_bound(self):
        with pytest.raises(ValueError):
            x0_clip(torch.zeros(1), 0.0)


class TestDdim:
    def test_timestep_subsequence(self):
        ts = ddim_timesteps(1000, 200)
        assert ts[0] == 1000 and ts[-1] == 1
        assert len(ts) == 200
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_full_sequence(self):
        assert ddim_timesteps(10, 10) == list(range(10, 0, -1))

    def test_too_many_steps_error(self):
        with pytest.raises(ValueError):
            ddim_timesteps(100, 101)
        s = build_schedule(100, 1e-4, 0.02)
        with pytest.raises(ValueError):
            ddim_sample(lambda z, t, c: torch.zeros_like(z), None, s,
                        SamplerConfig(num_steps=101), (1, 1, 4, 4))

    def test_deterministic_at_eta0(self):
        s = build_schedule(50, 1e-4, 0.02)

        def denoiser(z, t, cond):
            return 0.1 * z

        cfg = SamplerConfig(num_steps=10, eta=0.0, seed=77)
        a = ddim_sample(denoiser, None, s, cfg, (2, 1, 4, 4))
        b = ddim_sample(denoiser, None, s, cfg, (2, 1, 4, 4))
        assert torch.equal(a, b)

    def test_zero_denoiser_closed_form(self):
        # eps=0 makes each update z <- z*sqrt(abar_prev/abar_t), telescoping
        # to z_T / sqrt(abar_T); clipping disabled to honor the recursion
        T = 50
        s = build_schedule(T, 1e-3, 0.02)
        cfg = SamplerConfig(num_steps=T, eta=0.0, seed=11, x0_bound=None)
        out = ddim_sample(lambda z, t, c: torch.zeros_like(z), None, s, cfg, (1, 2, 4, 4))
        z_init = torch.randn((1, 2, 4, 4), generator=torch.Generator().manual_seed(11))
        expected = z_init / float(s.alpha_bar[-1]) ** 0.5
        assert torch.allclose(out, expected, atol=1e-6)

    def test_w1_matches_bypassed_null_path(self):
        s = build_schedule(40, 1e-4, 0.02)

        def denoiser(z, t, cond):
            shift = 0.0 if cond is None or cond == "c" else 1.0
            return 0.05 * z + shift

        cfg = SamplerConfig(num_steps=8, guidance_scale=1.0, eta=0.0, seed=3)
        with_null = ddim_sample(denoiser, "c", s, cfg, (1, 1, 2, 2), cond_null="null")
        without = ddim_sample(denoiser, "c", s, cfg, (1, 1, 2, 2))
        assert torch.equal(with_null, without)

    def test_eta_one_still_runs_and_differs(self):
        s = build_schedule(40, 1e-4, 0.02)
        det = ddim_sample(lambda z, t, c: 0.1 * z, None, s,
                          SamplerConfig(num_steps=8, eta=0.0, seed=5), (1, 1, 4, 4))
        sto = ddim_sample(lambda z, t, c: 0.1 * z, None, s,
                          SamplerConfig(num_steps=8, eta=1.0, seed=5), (1, 1, 4, 4))
        assert not torch.equal(det, sto)
        assert torch.all(torch.isfinite(sto))

    def test_guidance_changes_output(self):
        s = build_schedule(40, 1e-4, 0.02)

        def denoiser(z, t, cond):
            return 0.1 * z + (0.5 if cond == "c" else -0.5)

        base = SamplerConfig(num_steps=8, guidance_scale=1.0, eta=0.0, seed=9)
        strong = SamplerConfig(num_steps=8, guidance_scale=3.0, eta=0.0, seed=9)
        a = ddim_sample(denoiser, "c", s, base, (1, 1, 2, 2), cond_null="n")
        b = ddim_sample(denoiser, "c", s, strong, (1, 1, 2, 2), cond_null="n")
        assert not torch.allclose(a, b)


class TestSamplerConfig:
    def test_paper_defaults(self):
        cfg = SamplerConfig()
        assert cfg.num_steps == 200
        assert cfg.guidance_scale == 3.0
        assert cfg.eta == 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(num_steps=0)
        with pytest.raises(ValueError):
            SamplerConfig(eta=1.5)
