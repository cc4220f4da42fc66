"""Diagonal Gaussians and the uniform mixture-of-experts over them.

All functions work on batched tensors: the last axis is the event dimension
and any leading axes are batch axes. Scalar-valued quantities (log densities,
entropies, KL divergences) are reduced over the last axis only.
"""

import math

import torch

from .errors import InputError, NumericError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
LOG_2PI = math.log(2.0 * math.pi)


class DiagGaussian:
    """Gaussian with diagonal covariance, parameterized by mean and log-variance.

    ``log_var`` is clamped to ``[LOG_VAR_MIN, LOG_VAR_MAX]`` on construction.
    """

    def __init__(self, mean, log_var, validate=True):
        mean = torch.as_tensor(mean)
        log_var = torch.as_tensor(log_var, dtype=mean.dtype)
        if mean.dim() == 0 or mean.shape[-1] < 1:
            raise InputError("DiagGaussian needs at least one dimension")
        if mean.shape != log_var.shape:
            raise InputError(
                f"mean shape {tuple(mean.shape)} != log_var shape {tuple(log_var.shape)}")
        if validate and not (torch.isfinite(mean).all() and torch.isfinite(log_var).all()):
            raise NumericError("DiagGaussian parameters must be finite")
        self.mean = mean
        self.log_var = log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def var(self):
        return self.log_var.exp()

    @property
    def std(self):
        return (0.5 * self.log_var).exp()

    def sample(self, noise):
        return sample_reparam(self, noise)

    def log_prob(self, z):
        return log_prob(self, z)

    def entropy(self):
        return entropy(self)

    def detach(self):
        return DiagGaussian(self.mean.detach(), self.log_var.detach(), validate=False)

    def roll(self, shifts):
        """Cyclically shift along the batch axis (axis 0)."""
        return DiagGaussian(self.mean.roll(shifts, 0), self.log_var.roll(shifts, 0),
                            validate=False)

    def __repr__(self):
        return f"DiagGaussian(shape={tuple(self.mean.shape)})"


def standard_normal(shape, dtype=torch.float32):
    zeros = torch.zeros(tuple(shape), dtype=dtype)
    return DiagGaussian(zeros, zeros.clone(), validate=False)


def _check_dims(g, x, what):
    x = torch.as_tensor(x, dtype=g.mean.dtype)
    if x.dim() == 0 or x.shape[-1] != g.dim:
        raise InputError(f"{what} has dim {x.shape[-1] if x.dim() else 0}, expected {g.dim}")
    return x


def sample_reparam(g, noise):
    """Return ``mean + exp(0.5 * log_var) * noise``."""
    noise = _check_dims(g, noise, "noise")
    return g.mean + g.std * noise


def log_prob(g, z):
    z = _check_dims(g, z, "z")
    sq = (z - g.mean) ** 2 / g.var
    return -0.5 * (LOG_2PI + g.log_var + sq).sum(-1)


def entropy(g):
    return 0.5 * g.dim * (1.0 + LOG_2PI) + 0.5 * g.log_var.sum(-1)


def kl_gaussian(q, p):
    """Closed-form KL(q || p) between diagonal Gaussians."""
    if q.dim != p.dim:
        raise InputError(f"KL between dims {q.dim} and {p.dim}")
    diff = q.mean - p.mean
    terms = (q.log_var - p.log_var).exp() + diff ** 2 / p.var - 1.0 + p.log_var - q.log_var
    return 0.5 * terms.sum(-1)


class MoEPosterior:
    """Uniform mixture ``(1/M) sum_m q_m`` of ``M >= 2`` diagonal Gaussians."""

    def __init__(self, components):
        components = list(components)
        if len(components) < 2:
            raise InputError("a mixture of experts needs at least two components")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise InputError(f"mixture components disagree on dim: {sorted(dims)}")
        self.components = components

    @property
    def dim(self):
        return self.components[0].dim

    def log_prob(self, z):
        return moe_log_prob(self, z)


def moe_log_prob(mixture, z):
    """Stable log density of a uniform mixture.

    ``mixture`` is a :class:`MoEPosterior` or any non-empty sequence of
    :class:`DiagGaussian`; a single component reduces to :func:`log_prob`.
    """
    comps = mixture.components if isinstance(mixture, MoEPosterior) else list(mixture)
    if not comps:
        raise InputError("empty mixture")
    lps = torch.stack([log_prob(c, z) for c in comps], dim=0)
    return torch.logsumexp(lps, dim=0) - math.log(len(comps))
