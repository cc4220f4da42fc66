"""DDPM prior over the shared latent.

The denoiser is trained with the epsilon-prediction loss on posterior samples.
Together with the closed-form terminal term ``KL(q(z_T | z_0) || N(0, I))`` it
provides the surrogate for ``E_q[-log p(z)]``. Ancestral sampling draws from
the learned prior.
"""

from dataclasses import dataclass

import math

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, InputError
from .model import mlp


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: torch.Tensor
    alphas_bar: torch.Tensor

    @property
    def T(self):
        return self.betas.shape[0]

    @property
    def alphas(self):
        return 1.0 - self.betas

    def to(self, dtype):
        return DiffusionSchedule(self.betas.to(dtype), self.alphas_bar.to(dtype))


def make_schedule(T=100, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule with cumulative products computed in float64."""
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas_bar = np.cumprod(1.0 - betas)
    return DiffusionSchedule(torch.from_numpy(betas), torch.from_numpy(alphas_bar))


def forward_marginal(schedule, z0, t, noise):
    """Closed-form ``q(z_t | z_0)`` draw: ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``t`` is an integer tensor of step indices broadcast against the batch axis.
    """
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 0).any() or (t >= schedule.T).any():
        raise InputError(f"step index out of range [0, {schedule.T})")
    abar = schedule.alphas_bar.to(z0.dtype)[t]
    if abar.dim() > 0:
        abar = abar.unsqueeze(-1)
    return abar.sqrt() * z0 + (1.0 - abar).sqrt() * noise


def timestep_embedding(t, dim=32, max_period=10000.0, dtype=torch.float32):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = nn.functional.pad(emb, (0, 1))
    return emb


class Denoiser(nn.Module):
    """Feed-forward epsilon predictor on ``[z_t; embed(t)]``."""

    def __init__(self, d_z, hidden=128, time_dim=32, n_hidden=2):
        super().__init__()
        self.d_z, self.hidden, self.time_dim, self.n_hidden = d_z, hidden, time_dim, n_hidden
        self.net = mlp(d_z + time_dim, hidden, d_z, n_hidden=n_hidden)

    def forward(self, z_t, t):
        t = torch.as_tensor(t, dtype=torch.long).expand(z_t.shape[0])
        emb = timestep_embedding(t, self.time_dim, dtype=z_t.dtype)
        return self.net(torch.cat([z_t, emb], dim=-1))


class DiffusionPrior(nn.Module):
    """Denoiser plus its (non-trainable) noise schedule."""

    def __init__(self, d_z, T=100, beta_start=1e-4, beta_end=0.02, hidden=128, time_dim=32):
        super().__init__()
        self.schedule_args = {"T": T, "beta_start": beta_start, "beta_end": beta_end}
        self.schedule = make_schedule(T, beta_start, beta_end)
        self.net = Denoiser(d_z, hidden=hidden, time_dim=time_dim)

    def config(self):
        return {"d_z": self.net.d_z, "hidden": self.net.hidden,
                "time_dim": self.net.time_dim, **self.schedule_args}

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg)

    def loss(self, z0, noise):
        return denoise_loss(self.net, self.schedule, z0, noise)

    def nll_surrogate(self, z0, noise):
        """Denoising loss plus the terminal KL: the ``-log p(z)`` stand-in."""
        return denoise_loss(self.net, self.schedule, z0, noise) + terminal_kl(self.schedule, z0)

    def sample(self, n, noise):
        return sample_prior(self.net, self.schedule, n, noise)


def fit_prior(prior, data, noise, steps=10_000, batch_size=256, lr=1e-3):
    """Train ``prior`` alone on fixed latent ``data`` with Adam; returns the loss trace."""
    if data.dim() != 2 or data.shape[1] != prior.net.d_z:
        raise InputError(f"data must have shape (n, {prior.net.d_z})")
    opt = torch.optim.Adam(prior.parameters(), lr=lr)
    trace = []
    for _ in range(steps):
        idx = noise.randint(data.shape[0], (batch_size,))
        loss = prior.loss(data[idx], noise)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append(loss.item())
    return trace


def denoise_loss(net, schedule, z0, noise):
    """Mean over the batch of ``||eps - net(z_t, t)||^2`` with uniform ``t``.

    Gradients reach both ``net`` and ``z0``.
    """
    if z0.dim() != 2 or z0.shape[0] == 0:
        raise InputError("denoise_loss expects a non-empty (batch, d_z) tensor")
    t = noise.randint(schedule.T, (z0.shape[0],))
    eps = noise.normal(z0.shape, dtype=z0.dtype)
    z_t = forward_marginal(schedule, z0, t, eps)
    return ((eps - net(z_t, t)) ** 2).sum(-1).mean()


def terminal_kl(schedule, z0):
    """Batch mean of ``KL(N(sqrt(abar_T) z0, (1 - abar_T) I) || N(0, I))``.

    The only part of the DDPM bound that grows with the scale of ``z0``; without
    it the posterior entropy term can inflate the latent scale unchecked.
    """
    abar = schedule.alphas_bar[-1].to(z0.dtype)
    per_dim = abar * z0 ** 2 + (1.0 - abar) - 1.0 - torch.log1p(-abar)
    return 0.5 * per_dim.sum(-1).mean()


@torch.no_grad()
def sample_prior(net, schedule, n, noise, dtype=None):
    """DDPM ancestral sampling from ``z_T ~ N(0, I)`` to ``z_0``.

    Uses the posterior variance ``beta~_t`` at each step and no noise at the
    final step.
    """
    if dtype is None:
        dtype = next(net.parameters()).dtype
    sched = schedule.to(dtype)
    betas, alphas, abar = sched.betas, sched.alphas, sched.alphas_bar
    z = noise.normal((n, net.d_z), dtype=dtype)
    for t in range(sched.T - 1, -1, -1):
        eps = net(z, torch.full((n,), t, dtype=torch.long))
        z = (z - betas[t] / (1.0 - abar[t]).sqrt() * eps) / alphas[t].sqrt()
        if t > 0:
            var = betas[t] * (1.0 - abar[t - 1]) / (1.0 - abar[t])
            z = z + var.sqrt() * noise.normal((n, net.d_z), dtype=dtype)
    return z
