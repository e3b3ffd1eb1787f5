"""Noise schedules, forward noising, the noise-prediction loss and ancestral sampling.

Timesteps are 1-based: ``t = 1`` is the last denoising step and ``t = T`` the
first. Arrays in :class:`NoiseSchedule` carry a leading entry for ``t = 0``
(``abar[0] = 1``) so they can be indexed by ``t`` directly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .synthvid import VideoClip


class ScheduleKind(str, enum.Enum):
    LINEAR = "linear"
    COSINE = "cosine"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    a: np.ndarray
    abar: np.ndarray
    sigma: np.ndarray
    kind: ScheduleKind = ScheduleKind.LINEAR

    def check_t(self, t) -> None:
        tt = np.asarray(t)
        if np.any(tt < 1) or np.any(tt > self.T):
            raise ConfigError(f"timestep {t} outside [1, {self.T}]")


def make_schedule(kind: ScheduleKind | str = "linear", T: int = 100) -> NoiseSchedule:
    """Linear betas (0.1/T up to 10/T, so abar_T stays near 0.007) or the cosine schedule."""
    kind = ScheduleKind(kind)
    if T < 2:
        raise ConfigError(f"a schedule needs T >= 2, got {T}")
    if kind is ScheduleKind.LINEAR:
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, min(scale * 0.01, 0.999), T)
    else:
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
    a = np.concatenate([[1.0], 1.0 - betas])
    abar = np.cumprod(a)
    sigma = np.zeros(T + 1)
    sigma[1:] = np.sqrt((1.0 - abar[:-1]) / (1.0 - abar[1:]) * (1.0 - a[1:]))
    return NoiseSchedule(T, a, abar, sigma, kind)


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t)
    c = torch.as_tensor(values, dtype=like.dtype)[t.long()]
    return c.reshape(c.shape + (1,) * (like.ndim - c.ndim)) if c.ndim else c


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one step per batch row."""
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} differs from data {tuple(z0.shape)}")
    sched.check_t(t)
    ab = _coef(sched.abar, t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def training_loss(model_forward: Callable, z0, cond, t, eps, plan, sched: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between ``eps`` and the prediction on ``add_noise(z0, t, eps)``.

    ``model_forward(z_t, t, cond, plan)`` returns the predicted noise.
    """
    z_t = add_noise(z0, t, eps, sched)
    return ((eps - model_forward(z_t, t, cond, plan)) ** 2).mean()


def ddpm_step(z_t: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule, fresh_noise=None) -> torch.Tensor:
    """One ancestral step ``z_t -> z_{t-1}``; the stochastic term vanishes at ``t = 1``."""
    if t < 1:
        raise ConfigError("ddpm_step needs t >= 1")
    sched.check_t(t)
    a = float(sched.a[t])
    mean = (z_t - (1.0 - a) / math.sqrt(1.0 - float(sched.abar[t])) * eps_hat) / math.sqrt(a)
    if t == 1 or fresh_noise is None:
        return mean
    return mean + float(sched.sigma[t]) * fresh_noise


def to_latent(clips) -> torch.Tensor:
    """Stack clips (values in [0, 1]) into a ``b, f, h, w, c`` tensor scaled to [-1, 1]."""
    data = np.stack([c.data if isinstance(c, VideoClip) else np.asarray(c) for c in clips])
    return torch.from_numpy(data.astype(np.float32)) * 2.0 - 1.0


def to_clips(z: torch.Tensor) -> list[VideoClip]:
    data = ((z.detach().cpu().double() + 1.0) / 2.0).clamp(0.0, 1.0).numpy()
    return [VideoClip(d) for d in data]


EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


@torch.no_grad()
def sample_pli(
    shape: tuple[int, ...],
    cond,
    tau: int,
    adapted_model: Callable,
    base_model: Callable,
    sched: NoiseSchedule,
    seed: int,
    *,
    snapshot_every: int = 0,
    snapshots: dict | None = None,
    return_latent: bool = False,
):
    """Phased sampling: ``adapted_model`` for ``t > tau``, ``base_model`` for ``t <= tau``.

    Both models are called as ``model(z_t, t, cond)``. Every step draws its fresh
    noise from one generator regardless of the branch taken, so runs with equal
    seeds share their noise sequence. Returns a list of clips (one per batch
    row), or the final latent when ``return_latent``.
    """
    if not 0 <= tau <= sched.T:
        raise ConfigError(f"tau={tau} outside [0, {sched.T}]")
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(shape, generator=gen)
    for t in range(sched.T, 0, -1):
        model = adapted_model if t > tau else base_model
        eps_hat = model(z, t, cond)
        if eps_hat.shape != z.shape:
            raise ShapeError(f"model returned {tuple(eps_hat.shape)} for latent {tuple(z.shape)}")
        noise = torch.randn(shape, generator=gen)
        z = ddpm_step(z, t, eps_hat.to(z.dtype), sched, noise)
        if snapshots is not None and snapshot_every and (t - 1) % snapshot_every == 0:
            snapshots[t - 1] = z.clone()
    return z if return_latent else to_clips(z)
