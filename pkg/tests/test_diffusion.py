import numpy as np
import pytest

from conftest import tiny_model
from trajflow import nn
from trajflow.diffusion import (
    NoiseSchedule,
    ddim_integrate,
    ddim_sample,
    ddim_timesteps,
    ddpm_loss,
    forward_noise,
    snr_crossing,
    snr_profile,
    write_snr_csv,
)

SCHED = NoiseSchedule.linear(300)


class TestSchedule:
    def test_monotone(self):
        assert SCHED.betas[0] == 1e-6 and SCHED.betas[-1] == 5e-2
        assert np.all(np.diff(SCHED.betas) > 0)
        assert np.all(np.diff(SCHED.alpha_bars) < 0)
        assert SCHED.alpha_bars[0] == pytest.approx(1.0, abs=1e-5)
        assert SCHED.alpha_bar(0) == 1.0 and SCHED.alpha_bar(300) == SCHED.alpha_bars[-1]
        with pytest.raises(ValueError):
            NoiseSchedule.linear(0)

    def test_timesteps(self):
        assert ddim_timesteps(300, 10).tolist() == list(range(30, 301, 30))
        assert ddim_timesteps(300, 300).tolist() == list(range(1, 301))
        assert ddim_timesteps(300, 1).tolist() == [300]
        for steps in (7, 50, 200):
            taus = ddim_timesteps(300, steps)
            assert len(taus) == steps and taus[-1] == 300 and np.all(np.diff(taus) > 0)
        for bad in (0, 301):
            with pytest.raises(ValueError):
                ddim_timesteps(300, bad)


class TestForwardNoise:
    def test_clean_limit(self):
        x = np.random.default_rng(0).normal(size=(4, 6))
        noisy, _ = forward_noise(x, 1, np.random.default_rng(1), SCHED)
        assert np.allclose(noisy, x, atol=1e-2)

    def test_errors(self):
        for bad in (0, 301):
            with pytest.raises(ValueError):
                forward_noise(np.zeros(3), bad, np.random.default_rng(0), SCHED)

    @pytest.mark.parametrize("step", [30, 150, 300])
    def test_monte_carlo_moments(self, step):
        r = np.random.default_rng(step)
        n = 10_000
        x = r.normal(0.5, 2.0, size=n)  # signal variance 4
        noisy, _ = forward_noise(x, np.full(n, step), r, SCHED)
        ab = SCHED.alpha_bar(step)
        resid = noisy - np.sqrt(ab) * x
        sigma = np.sqrt(1 - ab)
        assert abs(resid.mean()) < 3 * sigma / 100
        # the variance needs more draws for a 3% band (relative s.e. sqrt(2/n))
        n = 100_000
        x = r.normal(0.5, 2.0, size=n)
        noisy, _ = forward_noise(x, np.full(n, step), r, SCHED)
        want = ab * x.var() + (1 - ab)
        assert noisy.var() == pytest.approx(want, rel=0.03)


class TestLoss:
    def test_oracle_and_zero_predictor(self, small_data):
        data, _ = small_data
        model, cfg = tiny_model(paradigm="ddpm", lambda_od=0.0)
        r = np.random.default_rng(0)
        b = data.subset(np.arange(20))
        step, eps = r.integers(1, 301, 20), r.standard_normal(b.x1.shape)

        class Oracle:
            encoder = model.encoder
            forward = staticmethod(lambda x, t, cond, e_c=None: nn.Tensor(eps))

        loss, _ = ddpm_loss(Oracle, b, r, cfg, SCHED, noise=(step, eps, np.zeros(20, bool)))
        assert loss.data == 0.0

        model.out.W.data[:] = 0.0
        model.out.b.data[:] = 0.0
        big = data.subset(np.resize(np.arange(len(data)), 10_000))
        loss, _ = ddpm_loss(model, big, r, cfg, SCHED)
        # masked MSE is per keypoint, so E|eps|^2 per sample is K times this value
        assert loss.data * cfg.K == pytest.approx(2 * cfg.K, rel=0.05)

    def test_gradient_check(self, small_data):
        data, _ = small_data
        model, cfg = tiny_model(paradigm="ddpm")
        b = data.subset(np.arange(4))
        r = np.random.default_rng(3)
        noise = (r.integers(1, 301, 4), r.standard_normal(b.x1.shape), np.array([False, True, False, False]))
        err = nn.gradient_check(lambda: ddpm_loss(model, b, None, cfg, SCHED, noise=noise)[0],
                                model.named_parameters(), h=1e-5, max_entries=6)
        assert err < 1e-4


class TestDdim:
    def test_oracle_inversion_one_step(self):
        sched = NoiseSchedule.linear(1)
        x = np.random.default_rng(0).normal(size=(5, 8))
        x_T, eps = forward_noise(x, 1, np.random.default_rng(1), sched)
        out = ddim_integrate(lambda xt, s: eps, x_T, 1, sched)
        assert np.max(np.abs(out - x)) < 1e-9

    def test_oracle_inversion_full_schedule(self):
        # an oracle that knows the data recovers it through every intermediate step
        x = np.random.default_rng(2).normal(size=(3, 4))
        x_T, _ = forward_noise(x, 300, np.random.default_rng(3), SCHED)

        def eps_fn(xt, step):
            ab = SCHED.alpha_bar(step)
            return (xt - np.sqrt(ab) * x) / np.sqrt(1 - ab)

        for steps in (1, 10, 300):
            assert np.max(np.abs(ddim_integrate(eps_fn, x_T, steps, SCHED) - x)) < 1e-9

    def test_deterministic(self, small_data):
        data, _ = small_data
        model, _ = tiny_model(paradigm="ddpm")
        cond = data.cond.subset(np.arange(3))
        x_T = np.random.default_rng(4).normal(size=(3, 12))
        a, od = ddim_sample(model, cond, 10, SCHED, x_T=x_T)
        b, _ = ddim_sample(model, cond, 10, SCHED, x_T=x_T.copy())
        assert np.array_equal(a, b) and a.shape == (3, 6, 2) and od.shape == (3, 6)


class TestSnr:
    def test_scaling_and_crossing(self, tmp_path):
        hi, lo = snr_profile(SCHED, 1.0), snr_profile(SCHED, 0.2)
        assert np.all(lo < hi)
        assert np.all(np.diff(hi) < 0)
        assert snr_crossing(lo) < snr_crossing(hi)
        assert hi[0] / hi[-1] > 1e4
        assert snr_crossing(np.array([5.0, 2.0])) is None
        with pytest.raises(ValueError):
            snr_profile(SCHED, 0.0)
        path = tmp_path / "snr.csv"
        write_snr_csv(path, SCHED, [1.0, 0.2])
        rows = path.read_text().splitlines()
        assert rows[0] == "step,snr_scale_1,snr_scale_0.2" and len(rows) == 301
        assert float(rows[1].split(",")[1]) == pytest.approx(hi[0])
