import math

import numpy as np
import pytest
import torch

from motionlab.diffusion import add_noise, ddpm_step, make_schedule, sample_pli, to_clips, to_latent, training_loss
from motionlab.errors import ConfigError, ShapeError
from motionlab.synthvid import ClipSpec, render_clip

# product of (1 - beta_t) for betas linspace(0.001, 0.1, 100), computed with a plain Python loop
ABAR_T_LINEAR_100 = 0.005363033969016422


def test_linear_abar_matches_loop_oracle():
    s = make_schedule("linear", 100)
    betas = [0.001 + (0.1 - 0.001) * i / 99 for i in range(100)]
    prod = 1.0
    for t, b in enumerate(betas, start=1):
        prod *= 1.0 - b
        assert abs(s.abar[t] - prod) <= 1e-6
    assert abs(s.abar[100] - ABAR_T_LINEAR_100) <= 1e-12
    assert s.abar[0] == 1.0
    assert np.allclose(np.cumprod(s.a), s.abar, atol=1e-12)


def test_cosine_schedule_closed_form():
    s = make_schedule("cosine", 100)
    f = lambda t: math.cos((t / 100 + 0.008) / 1.008 * math.pi / 2) ** 2
    for t in (1, 10, 50, 90):
        assert abs(s.abar[t] - f(t) / f(0)) < 1e-9


def test_sigma_posterior_variance():
    s = make_schedule("linear", 50)
    assert s.sigma[1] == 0.0
    t = 20
    expect = (1 - s.abar[t - 1]) / (1 - s.abar[t]) * (1 - s.a[t])
    assert math.isclose(s.sigma[t] ** 2, expect, rel_tol=1e-12)
    assert np.all(np.diff(s.abar) < 0)


def test_schedule_errors():
    with pytest.raises(ConfigError):
        make_schedule("linear", 1)
    with pytest.raises(ValueError):
        make_schedule("quadratic", 10)
    s = make_schedule("linear", 10)
    with pytest.raises(ConfigError):
        s.check_t(0)
    with pytest.raises(ConfigError):
        s.check_t(11)


def test_add_noise_monte_carlo_moments():
    s = make_schedule("linear", 100)
    g = torch.Generator().manual_seed(0)
    z0 = torch.full((20000, 4), 0.7, dtype=torch.float64)
    for t in (1, 30, 100):
        eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
        zt = add_noise(z0, t, eps, s)
        var = zt.var().item()
        assert abs(var - (1 - s.abar[t])) / (1 - s.abar[t]) < 0.05
        assert abs(zt.mean().item() - 0.7 * math.sqrt(s.abar[t])) < 0.02


def test_add_noise_per_row_timesteps():
    s = make_schedule("linear", 10)
    z0 = torch.ones(3, 2)
    eps = torch.zeros(3, 2)
    zt = add_noise(z0, torch.tensor([1, 5, 10]), eps, s)
    assert torch.allclose(zt[:, 0], torch.tensor(np.sqrt(s.abar[[1, 5, 10]]), dtype=torch.float32))
    with pytest.raises(ShapeError):
        add_noise(z0, 3, torch.zeros(2, 2), s)


def test_t1_roundtrip_with_oracle_noise():
    s = make_schedule("linear", 100)
    g = torch.Generator().manual_seed(1)
    z0 = torch.rand(2, 4, 8, 8, 3, generator=g) * 2 - 1
    eps = torch.randn(z0.shape, generator=g)
    z1 = add_noise(z0, 1, eps, s)
    rec = ddpm_step(z1, 1, eps, s, fresh_noise=torch.randn(z0.shape, generator=g))
    assert (rec - z0).abs().max().item() <= 1e-4


def test_ddpm_step_hand_computed():
    s = make_schedule("linear", 10)
    zt = torch.tensor([1.0])
    eh = torch.tensor([0.5])
    noise = torch.tensor([2.0])
    t = 4
    mean = (1.0 - (1 - s.a[t]) / math.sqrt(1 - s.abar[t]) * 0.5) / math.sqrt(s.a[t])
    assert math.isclose(ddpm_step(zt, t, eh, s, noise).item(), mean + s.sigma[t] * 2.0, rel_tol=1e-6)
    assert math.isclose(ddpm_step(zt, t, eh, s).item(), mean, rel_tol=1e-6)
    with pytest.raises(ConfigError):
        ddpm_step(zt, 0, eh, s)


def test_training_loss_zero_for_oracle():
    s = make_schedule("linear", 10)
    g = torch.Generator().manual_seed(0)
    z0 = torch.randn(2, 3, generator=g)
    eps = torch.randn(2, 3, generator=g)
    oracle = lambda zt, t, c, p: eps
    assert training_loss(oracle, z0, None, 5, eps, None, s).item() == 0.0
    zero = lambda zt, t, c, p: torch.zeros_like(zt)
    assert math.isclose(training_loss(zero, z0, None, 5, eps, None, s).item(), (eps**2).mean().item(), rel_tol=1e-6)


def _linear_models():
    a = lambda z, t, c: 0.3 * z + 0.01 * t
    b = lambda z, t, c: -0.2 * z
    return a, b


def test_pli_degenerate_cases_bitwise():
    s = make_schedule("linear", 20)
    adapted, base = _linear_models()
    shape = (2, 3, 8, 8, 3)
    only_base = sample_pli(shape, None, 0, base, base, s, seed=5, return_latent=True)
    only_adapted = sample_pli(shape, None, 0, adapted, adapted, s, seed=5, return_latent=True)
    assert torch.equal(sample_pli(shape, None, 20, adapted, base, s, seed=5, return_latent=True), only_base)
    assert torch.equal(sample_pli(shape, None, 0, adapted, base, s, seed=5, return_latent=True), only_adapted)
    mid = sample_pli(shape, None, 6, adapted, base, s, seed=5, return_latent=True)
    assert not torch.equal(mid, only_base) and not torch.equal(mid, only_adapted)


def test_pli_branch_schedule_and_snapshots():
    s = make_schedule("linear", 10)
    calls = []

    def spy(tag):
        def fn(z, t, c):
            calls.append((tag, t))
            return torch.zeros_like(z)

        return fn

    snaps = {}
    sample_pli((1, 2, 8, 8, 3), None, 3, spy("A"), spy("B"), s, seed=0, snapshot_every=5, snapshots=snaps)
    assert calls == [("A", t) for t in range(10, 3, -1)] + [("B", t) for t in range(3, 0, -1)]
    assert sorted(snaps) == [0, 5]
    with pytest.raises(ConfigError):
        sample_pli((1, 2, 8, 8, 3), None, 11, spy("A"), spy("B"), s, seed=0)
    with pytest.raises(ShapeError):
        sample_pli((1, 2, 8, 8, 3), None, 0, lambda z, t, c: z[:, :1], spy("B"), s, seed=0)


def test_pli_returns_clips_in_range():
    s = make_schedule("linear", 5)
    clips = sample_pli((2, 2, 8, 8, 3), None, 0, lambda z, t, c: torch.zeros_like(z), None, s, seed=0)
    assert len(clips) == 2 and clips[0].data.shape == (2, 8, 8, 3)
    assert all(c.data.min() >= 0 and c.data.max() <= 1 for c in clips)


def test_latent_roundtrip():
    clip = render_clip(ClipSpec())
    z = to_latent([clip])
    assert z.min() >= -1 and z.max() <= 1
    assert np.allclose(to_clips(z)[0].data, clip.data, atol=1e-6)
