import mpmath as mp
import pytest
import torch

from causvid.schedule import (
    INFERENCE_TIMESTEPS,
    build_schedule,
    cfg_combine,
    ddim_sample,
    ddim_step,
    denoising_loss,
    forward_diffuse,
    score_from_eps,
)

mp.mp.dps = 50


def cosine_abar_highprec(t: int, T: int = 1000) -> mp.mpf:
    """Independent extended-precision recomputation of the cosine cumulative product."""
    s = mp.mpf("0.008")

    def f(u):
        return mp.cos((u / T + s) / (1 + s) * mp.pi / 2) ** 2

    return f(mp.mpf(t)) / f(mp.mpf(0))


@pytest.fixture(scope="module")
def sched():
    return build_schedule(1000, "cosine")


class TestBuildSchedule:
    def test_endpoint_clamp(self, sched):
        assert sched.alpha[0].item() == 1.0
        assert sched.sigma[0].item() == 0.0

    def test_variance_preserving(self, sched):
        vp = sched.alpha**2 + sched.sigma**2
        assert torch.max(torch.abs(vp - 1)).item() < 1e-9

    def test_monotone(self, sched):
        assert torch.all(sched.alpha[1:] <= sched.alpha[:-1])
        assert torch.all(sched.sigma[1:] >= sched.sigma[:-1])

    def test_alpha_500_matches_highprec_oracle(self, sched):
        expected = float(mp.sqrt(cosine_abar_highprec(500)))
        assert abs(sched.alpha[500].item() - expected) < 1e-9

    def test_sigma_T_clamped(self):
        for kind in ("cosine", "linear"):
            s = build_schedule(1000, kind)
            assert s.sigma[-1].item() >= 0.999

    def test_linear_valid(self):
        s = build_schedule(1000, "linear")
        assert torch.max(torch.abs(s.alpha**2 + s.sigma**2 - 1)).item() < 1e-9

    def test_deterministic(self):
        a = build_schedule(500, "cosine")
        b = build_schedule(500, "cosine")
        assert torch.equal(a.alpha, b.alpha) and torch.equal(a.sigma, b.sigma)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            build_schedule(1, "cosine")
        with pytest.raises(ValueError):
            build_schedule(1000, "quadratic")


class TestForwardDiffuse:
    def test_t0_identity(self, sched):
        x0 = torch.randn(4, 3)
        out = forward_diffuse(x0, 0, torch.randn(4, 3), sched)
        assert torch.equal(out, x0)

    def test_zero_signal(self, sched):
        eps = torch.randn(5, 2, dtype=torch.float64)
        out = forward_diffuse(torch.zeros(5, 2, dtype=torch.float64), 700, eps, sched)
        assert torch.allclose(out, sched.sigma[700] * eps)

    def test_t1000_matches_highprec_oracle(self, sched):
        abar = cosine_abar_highprec(1000)
        a, s = mp.sqrt(abar), mp.sqrt(1 - abar)
        x0 = torch.tensor([1.0, 1.0], dtype=torch.float64)
        eps = torch.tensor([0.5, -0.5], dtype=torch.float64)
        out = forward_diffuse(x0, 1000, eps, sched)
        expected = torch.tensor([float(a + s / 2), float(a - s / 2)], dtype=torch.float64)
        assert torch.allclose(out, expected, atol=1e-12)

    def test_shape_and_range_errors(self, sched):
        with pytest.raises(ValueError):
            forward_diffuse(torch.zeros(2), 1, torch.zeros(3), sched)
        with pytest.raises(ValueError):
            forward_diffuse(torch.zeros(2), 1001, torch.zeros(2), sched)

    def test_marginal_variance(self, sched):
        # Var(x_t) = alpha^2 Var(x0) + sigma^2 for unit-variance data, within 3 sigma.
        g = torch.Generator().manual_seed(0)
        n = 10_000
        for t in (100, 500, 900):
            x0 = torch.randn(n, generator=g, dtype=torch.float64)
            eps = torch.randn(n, generator=g, dtype=torch.float64)
            xt = forward_diffuse(x0, t, eps, sched)
            se = float(xt.var(correction=1)) * (2.0 / (n - 1)) ** 0.5
            assert abs(float(xt.var(correction=1)) - 1.0) < 3 * se + 3e-3


class TestScoreFromEps:
    def test_direct_substitution(self, sched):
        t = int(torch.argmin(torch.abs(sched.sigma - 0.2)))
        eps_hat = torch.tensor([0.4], dtype=torch.float64)
        out = score_from_eps(eps_hat, t, sched)
        assert torch.allclose(out, -eps_hat / sched.sigma[t], atol=1e-12)

    def test_zeros(self, sched):
        assert torch.equal(score_from_eps(torch.zeros(3), 500, sched), torch.zeros(3))

    def test_rejects_t0(self, sched):
        with pytest.raises(ValueError):
            score_from_eps(torch.ones(1), 0, sched)

    def test_mutually_recoverable(self, sched):
        g = torch.Generator().manual_seed(1)
        for t in (1, 247, 502, 999):
            eps = torch.randn(8, generator=g, dtype=torch.float64)
            s = score_from_eps(eps, t, sched)
            assert torch.allclose(-sched.sigma[t] * s, eps, atol=1e-12)

    def test_gaussian_score_analytic(self, sched):
        # For data ~ N(0, 1) the exact noise prediction is sigma_t * x_t, and the
        # score reparameterization must reproduce -x_t / (alpha^2 + sigma^2).
        g = torch.Generator().manual_seed(2)
        x_t = torch.randn(100, generator=g, dtype=torch.float64)
        for t in (300, 700):
            a, s = sched.alpha[t], sched.sigma[t]
            eps_hat = s * x_t  # analytic eps for zero-mean unit-variance data
            score = score_from_eps(eps_hat, t, sched)
            assert torch.allclose(score, -x_t / (a**2 + s**2), atol=1e-9)


class TestDenoisingLoss:
    def test_zero_when_equal(self):
        x = torch.randn(4, 4)
        assert denoising_loss(x, x).item() == 0.0

    def test_mean_of_squares(self):
        loss = denoising_loss(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 0.0]))
        assert loss.item() == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            denoising_loss(torch.zeros(2), torch.zeros(3))

    def test_gradient_matches_finite_difference(self):
        g = torch.Generator().manual_seed(3)
        eps_hat = torch.randn(6, generator=g, dtype=torch.float64, requires_grad=True)
        eps = torch.randn(6, generator=g, dtype=torch.float64)
        denoising_loss(eps_hat, eps).backward()
        h = 1e-6
        for i in range(6):
            d = torch.zeros(6, dtype=torch.float64)
            d[i] = h
            fd = (denoising_loss(eps_hat.detach() + d, eps) - denoising_loss(eps_hat.detach() - d, eps)) / (2 * h)
            assert abs(eps_hat.grad[i].item() - fd.item()) / max(abs(fd.item()), 1e-12) < 1e-3


class TestDdimStep:
    def test_inverts_forward_diffuse(self, sched):
        g = torch.Generator().manual_seed(4)
        x0 = torch.randn(5, generator=g, dtype=torch.float64)
        eps = torch.randn(5, generator=g, dtype=torch.float64)
        x_t = forward_diffuse(x0, 600, eps, sched)
        back = ddim_step(x_t, eps, 600, 0, sched)
        assert torch.allclose(back, x0, atol=1e-10)

    def test_zero_eps_scaling(self, sched):
        x_t = torch.randn(3, dtype=torch.float64)
        out = ddim_step(x_t, torch.zeros(3, dtype=torch.float64), 500, 200, sched)
        assert torch.allclose(out, (sched.alpha[200] / sched.alpha[500]) * x_t, atol=1e-12)

    def test_bit_deterministic(self, sched):
        x_t = torch.randn(7)
        eps = torch.randn(7)
        a = ddim_step(x_t, eps, 750, 500, sched)
        b = ddim_step(x_t.clone(), eps.clone(), 750, 500, sched)
        assert torch.equal(a, b)

    def test_rejects_bad_order(self, sched):
        with pytest.raises(ValueError):
            ddim_step(torch.zeros(1), torch.zeros(1), 200, 500, sched)
        with pytest.raises(ValueError):
            ddim_step(torch.zeros(1), torch.zeros(1), 200, 200, sched)

    def test_matches_exact_affine_oracle(self, sched):
        # With the analytic Gaussian score the DDIM recursion is affine:
        # deviation factor prod(alpha_s alpha_t + sigma_s sigma_t), mean exact.
        # Verifies the implementation against the closed form of its own grid.
        mu = 1.3
        grid = [int(v) for v in torch.linspace(999, 0, 33).round()]
        g = torch.Generator().manual_seed(5)
        x = torch.randn(20_000, generator=g, dtype=torch.float64)
        start = x.clone()

        def eps_fn(x_t, t):
            return sched.sigma[t] * (x_t - sched.alpha[t] * mu)

        out, _ = ddim_sample(eps_fn, x, grid, sched)
        factor, shift = mp.mpf(1), mp.mpf(0)
        for a, b in zip(grid, grid[1:]):
            aa, sa = mp.mpf(sched.alpha[a].item()), mp.mpf(sched.sigma[a].item())
            ab, sb = mp.mpf(sched.alpha[b].item()), mp.mpf(sched.sigma[b].item())
            # one step: x' = ab * (x - sa*eps)/aa + sb*eps with eps = sa*(x - aa*mu)
            #         = x * (ab/aa - ab*sa^2/aa + sb*sa) + mu * (ab*sa^2 - sb*sa*aa)
            coeff_x = ab / aa - ab * sa**2 / aa + sb * sa
            coeff_mu = ab * sa**2 - sb * sa * aa
            factor_new = coeff_x * factor
            shift = coeff_x * shift + coeff_mu * mu
            factor = factor_new
        expected = float(factor) * start + float(shift)
        assert torch.allclose(out, expected, atol=1e-9)

    def test_converges_to_target_moments_with_fine_grid(self, sched):
        # 128 steps brings the first-order integrator within 3 SE of N(mu, 1).
        mu = 1.0
        grid = sorted({int(v) for v in torch.linspace(999, 0, 129).round()}, reverse=True)
        g = torch.Generator().manual_seed(6)
        x = torch.randn(10_000, generator=g, dtype=torch.float64)

        def eps_fn(x_t, t):
            return sched.sigma[t] * (x_t - sched.alpha[t] * mu)

        out, _ = ddim_sample(eps_fn, x, grid, sched)
        n = out.numel()
        se_mean = out.std(correction=1).item() / n**0.5
        se_var = out.var(correction=1).item() * (2 / (n - 1)) ** 0.5
        assert abs(out.mean().item() - mu) < 3 * se_mean
        assert abs(out.var(correction=1).item() - 1.0) < 3 * se_var


class TestCfgCombine:
    def test_w1_returns_cond_exactly(self):
        c, u = torch.randn(4), torch.randn(4)
        assert torch.equal(cfg_combine(c, u, 1.0), c)

    def test_w0_returns_uncond_exactly(self):
        c, u = torch.randn(4), torch.randn(4)
        assert torch.equal(cfg_combine(c, u, 0.0), u)

    def test_paper_scale(self):
        out = cfg_combine(torch.tensor([1.0]), torch.tensor([0.0]), 3.5)
        assert out.item() == pytest.approx(3.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_combine(torch.zeros(2), torch.zeros(3), 2.0)


def test_inference_timesteps_fixed():
    assert INFERENCE_TIMESTEPS == (999, 748, 502, 247)
