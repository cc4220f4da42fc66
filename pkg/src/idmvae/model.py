"""Multimodal VAE with a shared latent ``z`` and per-modality private latents ``w_m``.

Each modality owns an encoder producing ``q(z | x_m)`` and ``q(w_m | x_m)``, a
decoder for ``p(x_m | z, w_m)``, and an auxiliary prior ``r(w~_m)`` used for
cross-modal reconstruction.
"""

from dataclasses import asdict, dataclass

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .distributions import DiagGaussian, standard_normal
from .errors import ConfigError, InputError, NumericError

LIKELIHOODS = ("gaussian", "bernoulli")


@dataclass(frozen=True)
class LatentSpec:
    d_z: int = 8
    d_w: int = 16
    n_modalities: int = 2

    def __post_init__(self):
        if min(self.d_z, self.d_w) < 1:
            raise ConfigError("latent dims must be positive")
        if self.n_modalities < 2:
            raise ConfigError("need at least two modalities")


@dataclass(frozen=True)
class ModalitySpec:
    input_dim: int
    likelihood: str = "gaussian"
    decoder_sigma: float = 1.0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")
        if not self.decoder_sigma > 0:
            raise ConfigError("decoder_sigma must be > 0")


def mlp(in_dim, hidden, out_dim, n_hidden=2):
    layers, d = [], in_dim
    for _ in range(n_hidden):
        layers += [nn.Linear(d, hidden), nn.SiLU()]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class ModalityNet(nn.Module):
    """Encoder(s) and decoder for one modality.

    Any module exposing ``input_dim``, ``encode(x) -> (z_mean, z_log_var,
    w_mean, w_log_var)`` and ``decode(zw) -> params`` can stand in for this
    class inside :class:`MultimodalModel`.
    """

    def __init__(self, input_dim, d_z, d_w, hidden=128, separate_encoders=True):
        super().__init__()
        self.input_dim = input_dim
        self.d_z, self.d_w = d_z, d_w
        self.separate_encoders = separate_encoders
        if separate_encoders:
            self.z_encoder = mlp(input_dim, hidden, 2 * d_z)
            self.w_encoder = mlp(input_dim, hidden, 2 * d_w)
        else:
            self.trunk = nn.Sequential(
                nn.Linear(input_dim, hidden), nn.SiLU(),
                nn.Linear(hidden, hidden), nn.SiLU())
            self.z_head = nn.Linear(hidden, 2 * d_z)
            self.w_head = nn.Linear(hidden, 2 * d_w)
        self.decoder = mlp(d_z + d_w, hidden, input_dim)

    def encode(self, x):
        if self.separate_encoders:
            hz, hw = self.z_encoder(x), self.w_encoder(x)
        else:
            h = self.trunk(x)
            hz, hw = self.z_head(h), self.w_head(h)
        z_mean, z_log_var = hz.chunk(2, dim=-1)
        w_mean, w_log_var = hw.chunk(2, dim=-1)
        return z_mean, z_log_var, w_mean, w_log_var

    def decode(self, zw):
        return self.decoder(zw)


class MultimodalModel(nn.Module):
    def __init__(self, latent, modalities, hidden=128, separate_encoders=True, nets=None):
        super().__init__()
        modalities = list(modalities)
        if len(modalities) != latent.n_modalities:
            raise ConfigError(
                f"{len(modalities)} modality specs for {latent.n_modalities} modalities")
        self.latent = latent
        self.modalities = modalities
        self.hidden = hidden
        self.separate_encoders = separate_encoders
        if nets is None:
            nets = [ModalityNet(s.input_dim, latent.d_z, latent.d_w, hidden, separate_encoders)
                    for s in modalities]
        self.nets = nn.ModuleList(nets)
        # r(w~_m): zero mean, learnable per-dimension log-variance
        self.aux_log_var = nn.Parameter(torch.zeros(latent.n_modalities, latent.d_w))

    @property
    def n_modalities(self):
        return self.latent.n_modalities

    @property
    def dtype(self):
        return self.aux_log_var.dtype

    def config(self):
        return {
            "latent": asdict(self.latent),
            "modalities": [asdict(s) for s in self.modalities],
            "hidden": self.hidden,
            "separate_encoders": self.separate_encoders,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(LatentSpec(**cfg["latent"]),
                   [ModalitySpec(**s) for s in cfg["modalities"]],
                   hidden=cfg.get("hidden", 128),
                   separate_encoders=cfg.get("separate_encoders", True))

    def _check_modality(self, m):
        if not 0 <= m < self.n_modalities:
            raise InputError(f"modality index {m} out of range [0, {self.n_modalities})")

    def encode(self, m, x):
        """Return the factorized posterior ``(q(z | x_m), q(w_m | x_m))``."""
        self._check_modality(m)
        x = torch.as_tensor(x, dtype=self.dtype)
        if x.shape[-1] != self.modalities[m].input_dim:
            raise InputError(
                f"modality {m} expects input dim {self.modalities[m].input_dim}, got {x.shape[-1]}")
        if not torch.isfinite(x).all():
            raise InputError(f"non-finite input for modality {m}")
        z_mean, z_lv, w_mean, w_lv = self.nets[m].encode(x)
        return DiagGaussian(z_mean, z_lv), DiagGaussian(w_mean, w_lv)

    def encode_all(self, xs):
        if len(xs) != self.n_modalities:
            raise InputError(f"expected {self.n_modalities} modalities, got {len(xs)}")
        return [self.encode(m, x) for m, x in enumerate(xs)]

    def decode(self, m, z, w):
        self._check_modality(m)
        if z.shape[-1] != self.latent.d_z or w.shape[-1] != self.latent.d_w:
            raise InputError(
                f"decode expects (d_z, d_w)=({self.latent.d_z}, {self.latent.d_w}), "
                f"got ({z.shape[-1]}, {w.shape[-1]})")
        return self.nets[m].decode(torch.cat([z, w], dim=-1))

    def log_likelihood(self, m, params, x):
        """``log p(x_m | params)`` summed over input dimensions."""
        self._check_modality(m)
        if not torch.isfinite(params).all():
            raise NumericError(f"non-finite likelihood parameters for modality {m}")
        spec = self.modalities[m]
        if spec.likelihood == "bernoulli":
            return -F.binary_cross_entropy_with_logits(params, x, reduction="none").sum(-1)
        sigma = spec.decoder_sigma
        sq = (x - params) ** 2 / (2.0 * sigma ** 2)
        return (-0.5 * math.log(2.0 * math.pi * sigma ** 2) - sq).sum(-1)

    def likelihood_mean(self, m, params):
        """Expected value of ``p(x_m | params)``; the relaxed sample for bernoulli."""
        if self.modalities[m].likelihood == "bernoulli":
            return torch.sigmoid(params)
        return params

    def generate(self, m, z, w, deterministic=True, noise=None):
        params = self.decode(m, z, w)
        spec = self.modalities[m]
        if deterministic:
            if spec.likelihood == "bernoulli":
                return (params > 0).to(params.dtype)
            return params
        if noise is None:
            raise InputError("stochastic generation needs a noise source")
        if spec.likelihood == "bernoulli":
            u = noise.uniform(params.shape, dtype=params.dtype)
            return (u < torch.sigmoid(params)).to(params.dtype)
        return params + spec.decoder_sigma * noise.normal(params.shape, dtype=params.dtype)

    def aux_prior(self, m, batch_shape=()):
        self._check_modality(m)
        lv = self.aux_log_var[m].expand(*batch_shape, self.latent.d_w)
        return DiagGaussian(torch.zeros_like(lv), lv, validate=False)

    def sample_aux_prior(self, m, noise):
        """Reparameterized draw from ``r(w~_m)`` given standard-normal ``noise``."""
        self._check_modality(m)
        noise = torch.as_tensor(noise, dtype=self.dtype)
        return (0.5 * self.aux_log_var[m]).exp() * noise

    def prior_w(self, batch_shape):
        return standard_normal((*batch_shape, self.latent.d_w), dtype=self.dtype)
