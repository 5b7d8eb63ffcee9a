"""Forward noising process, per-token denoising head, and reverse sampling.

The head is a small residual MLP that predicts the noise added to a single
latent token, conditioned on a contextual vector z produced by the sequence
backbone. Sampling runs the reverse process per token, optionally on a strided
subset of steps and with guidance between conditional and unconditional
contexts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .validation import ConfigurationError, as_generator, check_positive_int


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise-variance schedule: betas, alphas = 1 - betas, and their running product.

    Arrays are float64 and 0-indexed; step t in [1, T] maps to index t - 1.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t - 1])

    def gather(self, name: str, t: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        """Vectorized lookup of a schedule array at 1-based steps `t`."""
        arr = torch.from_numpy(getattr(self, name))
        return arr.to(dtype)[t.long() - 1]


def make_schedule(T: int = 1000, beta_min: float = 2e-4, beta_max: float = 0.03,
                  spacing: str = "log") -> DiffusionSchedule:
    """Build a schedule with log-spaced betas running from beta_min to beta_max."""
    check_positive_int(T, "T")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    if spacing != "log":
        raise ConfigurationError(f"unknown spacing {spacing!r}; supported: 'log'")
    betas = np.geomspace(beta_min, beta_max, num=T, dtype=np.float64)
    betas[0] = beta_min
    betas[-1] = beta_max
    alphas = 1.0 - betas
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def noise(x: torch.Tensor, t, epsilon: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Closed-form forward noising: sqrt(abar_t) * x + sqrt(1 - abar_t) * eps.

    `t` may be a scalar step or a per-row tensor of steps for batched x.
    """
    if torch.is_tensor(t):
        if (t.min() < 1) or (t.max() > sched.T):
            raise IndexError(f"step out of range [1, {sched.T}]")
        ab = sched.gather("alpha_bars", t, dtype=x.dtype)
        while ab.dim() < x.dim():
            ab = ab.unsqueeze(-1)
    else:
        if not (1 <= t <= sched.T):
            raise IndexError(f"step {t} out of range [1, {sched.T}]")
        ab = torch.tensor(sched.alpha_bar(int(t)), dtype=x.dtype)
    return torch.sqrt(ab) * x + torch.sqrt(1.0 - ab) * epsilon


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double().unsqueeze(-1) * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class _ResidualBlock(nn.Module):
    def __init__(self, width: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.linear = nn.Linear(width, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, h):
        return h + self.drop(nn.functional.silu(self.linear(self.norm(h))))


class DiffusionHead(nn.Module):
    """Per-token noise estimator eps(x_t, t, z) built from residual MLP blocks.

    The noisy token, the contextual vector, and a sinusoidal step embedding are
    concatenated and projected to the block width; the output projection maps
    back to the latent dimension.
    """

    def __init__(self, latent_dim: int, context_dim: int, width: int = 64,
                 blocks: int = 12, dropout: float = 0.1):
        super().__init__()
        self.latent_dim = latent_dim
        self.context_dim = context_dim
        self.width = width
        self.in_proj = nn.Linear(latent_dim + context_dim + width, width)
        self.blocks = nn.ModuleList(_ResidualBlock(width, dropout) for _ in range(blocks))
        self.out_norm = nn.LayerNorm(width)
        self.out_proj = nn.Linear(width, latent_dim)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        temb = timestep_embedding(t, self.width).to(x_t.dtype)
        if temb.dim() < x_t.dim():
            temb = temb.expand(*x_t.shape[:-1], self.width)
        h = self.in_proj(torch.cat([x_t, z, temb], dim=-1))
        for block in self.blocks:
            h = block(h)
        return self.out_proj(self.out_norm(h))


def head_loss(x: torch.Tensor, z: torch.Tensor, head, sched: DiffusionSchedule,
              K: int = 1, generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean over K draws of (t, eps) of the squared noise-prediction error.

    Accepts a single token (d,) or a batch (N, d) with matching contexts; every
    row draws its own steps and noise. Gradients flow into the head and into z.
    """
    check_positive_int(K, "K")
    single = x.dim() == 1
    if single:
        x = x.unsqueeze(0)
        z = z.unsqueeze(0)
    n = x.shape[0]
    xr = x.repeat_interleave(K, dim=0)
    zr = z.repeat_interleave(K, dim=0)
    t = torch.randint(1, sched.T + 1, (n * K,), generator=generator)
    eps = torch.empty_like(xr).normal_(generator=generator)
    x_t = noise(xr, t, eps, sched)
    pred = head(x_t, t, zr)
    return ((eps - pred) ** 2).sum(dim=-1).mean()


def reverse_step(x_t: torch.Tensor, t: int, z: torch.Tensor, head,
                 sched: DiffusionSchedule, noise_scale: float = 1.0,
                 rng=None, eps_hat: torch.Tensor | None = None) -> torch.Tensor:
    """One reverse update from step t to t - 1.

    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
              + noise_scale * sqrt(beta_t) * fresh_eps
    The additive noise term is dropped at t = 1 (and no noise is drawn).
    `eps_hat` overrides the head evaluation, e.g. for guided predictions.
    """
    if not (1 <= t <= sched.T):
        raise IndexError(f"step {t} out of range [1, {sched.T}]")
    if noise_scale < 0:
        raise ConfigurationError("noise_scale must be >= 0")
    if eps_hat is None:
        tt = torch.full(x_t.shape[:-1], t, dtype=torch.long)
        eps_hat = head(x_t, tt, z)
    coef = sched.beta(t) / math.sqrt(1.0 - sched.alpha_bar(t))
    mean = (x_t - coef * eps_hat) / math.sqrt(sched.alpha(t))
    if t == 1 or noise_scale == 0.0:
        return mean
    rng = as_generator(rng)
    fresh = torch.from_numpy(rng.standard_normal(tuple(x_t.shape))).to(x_t.dtype)
    return mean + noise_scale * math.sqrt(sched.beta(t)) * fresh


def step_subsequence(T: int, steps: int) -> np.ndarray:
    """Strictly decreasing step indices for few-step sampling.

    Evenly spaced over [T, 1], always containing both endpoints when steps >= 2.
    """
    check_positive_int(steps, "steps")
    if steps > T:
        raise ConfigurationError(f"steps={steps} exceeds schedule length T={T}")
    ts = np.unique(np.round(np.linspace(T, 1, num=steps)).astype(np.int64))[::-1]
    return ts


def sample_token(z: torch.Tensor, head, sched: DiffusionSchedule, steps: int = 20,
                 noise_scale: float = 1.0, cfg_scale: float = 1.0,
                 z_uncond: torch.Tensor | None = None, rng=None) -> torch.Tensor:
    """Draw token(s) from p(x | z) by reversing the diffusion process.

    `z` may be a single context (d_ctx,) or a batch (B, d_ctx); the result has
    matching leading shape. With cfg_scale != 1 each noise prediction becomes
    eps_u + cfg_scale * (eps_c - eps_u) using `z_uncond`; at scale 1 the
    unconditional context is never evaluated, so conditional sampling is
    reproduced exactly.
    """
    rng = as_generator(rng)
    single = z.dim() == 1
    if single:
        z = z.unsqueeze(0)
        if z_uncond is not None and z_uncond.dim() == 1:
            z_uncond = z_uncond.unsqueeze(0)
    if cfg_scale != 1.0 and z_uncond is None:
        raise ConfigurationError("cfg_scale != 1 requires an unconditional context")
    d = head.latent_dim
    x = torch.from_numpy(rng.standard_normal((z.shape[0], d))).to(z.dtype)
    ts = step_subsequence(sched.T, steps)
    for i, t in enumerate(ts):
        t = int(t)
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        eps_hat = head(x, tt, z)
        if cfg_scale != 1.0:
            eps_unc = head(x, tt, z_uncond)
            eps_hat = eps_unc + cfg_scale * (eps_hat - eps_unc)
        last = i == len(ts) - 1
        x = reverse_step(x, t, z, head, sched,
                         noise_scale=0.0 if last else noise_scale,
                         rng=rng, eps_hat=eps_hat)
    return x.squeeze(0) if single else x
