"""Discrete-time diffusion math: noise schedules, forward noising, score
reparameterization, denoising loss, deterministic DDIM stepping, and
classifier-free guidance combination.

All functions here are pure; the tables in :class:`NoiseSchedule` are the only
state and are immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

# Denoising timesteps used by the few-step student at inference, highest first.
INFERENCE_TIMESTEPS = (999, 748, 502, 247)


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal/noise coefficient tables alpha[t], sigma[t] for t in [0, T].

    Variance preserving: alpha[t]^2 + sigma[t]^2 = 1. Tables are float64;
    cast at the point of use.
    """

    T: int
    alpha: torch.Tensor  # (T+1,) float64, non-increasing, alpha[0] = 1
    sigma: torch.Tensor  # (T+1,) float64, non-decreasing, sigma[0] = 0

    def __post_init__(self):
        if self.alpha.shape != (self.T + 1,) or self.sigma.shape != (self.T + 1,):
            raise ValueError("schedule tables must have T+1 entries")
        if self.alpha[0].item() != 1.0 or self.sigma[0].item() != 0.0:
            raise ValueError("schedule endpoints must be clamped to alpha[0]=1, sigma[0]=0")
        if torch.any(self.alpha[1:] > self.alpha[:-1]) or torch.any(self.sigma[1:] < self.sigma[:-1]):
            raise ValueError("alpha must be non-increasing and sigma non-decreasing")
        vp = self.alpha**2 + self.sigma**2
        if torch.max(torch.abs(vp - 1.0)).item() > 1e-9:
            raise ValueError("variance-preserving contract violated beyond 1e-9")

    def coeffs(self, t, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """(alpha[t], sigma[t]) cast to `dtype`; `t` may be int or a tensor of indices."""
        if not torch.is_tensor(t):
            t = torch.as_tensor(t)
        if torch.any(t < 0) or torch.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]")
        return self.alpha[t].to(dtype), self.sigma[t].to(dtype)


def build_schedule(T: int = 1000, kind: str = "cosine") -> NoiseSchedule:
    """Build a variance-preserving schedule of length T+1.

    `cosine` is the cumulative-product cosine schedule (offset 0.008);
    `linear` is the classic linear-beta schedule. Both are clamped so that
    alpha[0]=1, sigma[0]=0 exactly and sigma[T] >= 0.999.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    t = torch.arange(T + 1, dtype=torch.float64)
    if kind == "cosine":
        s = 0.008
        f = torch.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
    elif kind == "linear":
        beta = torch.linspace(1e-4, 0.02, T, dtype=torch.float64)
        abar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1 - beta, dim=0)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    abar = abar.clamp(min=0.0, max=1.0)
    alpha = torch.sqrt(abar)
    sigma = torch.sqrt(1 - abar)
    alpha[0], sigma[0] = 1.0, 0.0
    if sigma[-1] < 0.999:
        sigma[-1] = 0.999
        alpha[-1] = math.sqrt(1 - 0.999**2)
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma)


def _bcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Left-align a per-item coefficient for broadcasting over trailing dims."""
    if coef.dim() == 0:
        return coef
    return coef.view(coef.shape + (1,) * (like.dim() - coef.dim()))


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = alpha_t * x0 + sigma_t * eps. `t` may be scalar or per-item/per-frame."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    a, s = sched.coeffs(t, x0.dtype)
    return _bcast(a, x0) * x0 + _bcast(s, x0) * eps


def score_from_eps(eps_hat: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Score s = -eps_hat / sigma_t; rejects t = 0 where sigma vanishes."""
    tt = torch.as_tensor(t)
    if torch.any(tt < 1):
        raise ValueError("score is undefined at t=0 (sigma=0)")
    _, s = sched.coeffs(tt, eps_hat.dtype)
    return -eps_hat / _bcast(s, eps_hat)


def denoising_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return torch.mean((eps_hat - eps) ** 2)


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
              sched: NoiseSchedule, clip_x0: float | None = None) -> torch.Tensor:
    """Deterministic DDIM update from t to t_prev (0 <= t_prev < t <= T).

    `clip_x0` optionally clamps the clean estimate to [-clip_x0, clip_x0]
    (with the noise estimate re-derived), the usual stabilization when the
    denoiser is queried far off-distribution; None leaves the update exact.
    """
    if not (0 <= t_prev < t <= sched.T):
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    a_t, s_t = sched.coeffs(t, x_t.dtype)
    if a_t.item() == 0.0:
        raise ValueError(f"alpha[{t}] = 0; cannot invert")
    a_p, s_p = sched.coeffs(t_prev, x_t.dtype)
    x0_hat = (x_t - s_t * eps_hat) / a_t
    if clip_x0 is not None:
        x0_hat = x0_hat.clamp(-clip_x0, clip_x0)
        eps_hat = (x_t - a_t * x0_hat) / s_t
    return a_p * x0_hat + s_p * eps_hat


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond).

    w=1 and w=0 return the conditional/unconditional branch exactly (no
    floating-point residue from the extrapolation formula).
    """
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    if w == 1.0:
        return eps_cond
    if w == 0.0:
        return eps_uncond
    return eps_uncond + w * (eps_cond - eps_uncond)


def make_sampling_grid(steps: int, t_start: int = 999, include: Sequence[int] = ()) -> list[int]:
    """Descending integer grid from t_start to 0 with `steps` steps, adjusted so
    that every timestep in `include` lies exactly on the grid."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    grid = [round(t_start - i * t_start / steps) for i in range(steps + 1)]
    for req in include:
        if not 0 <= req <= t_start:
            raise ValueError(f"required timestep {req} outside [0, {t_start}]")
        nearest = min(range(len(grid)), key=lambda i: (abs(grid[i] - req), i))
        grid[nearest] = req
    grid = sorted(set(grid), reverse=True)
    if grid[0] != t_start or grid[-1] != 0:
        raise ValueError("grid adjustment displaced an endpoint")
    return grid


def ddim_sample(eps_fn: Callable[[torch.Tensor, int], torch.Tensor], x_start: torch.Tensor,
                grid: Sequence[int], sched: NoiseSchedule,
                record_at: Sequence[int] = ()) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Run DDIM along a descending timestep grid ending at 0.

    `eps_fn(x, t)` predicts the noise; `x_start` is the state at grid[0].
    Returns the endpoint and, for each t in `record_at`, a snapshot of the
    state while it sat at that grid point.
    """
    grid = list(grid)
    if grid[-1] != 0 or any(b >= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly descending and end at 0")
    record = set(record_at)
    snaps: dict[int, torch.Tensor] = {}
    x = x_start
    for t, t_prev in zip(grid, grid[1:]):
        if t in record:
            snaps[t] = x.clone()
        x = ddim_step(x, eps_fn(x, t), t, t_prev, sched)
    if 0 in record:
        snaps[0] = x.clone()
    return x, snaps
