"""Training objectives.

``total = mmvae_plus + lambda1 * cross_mi + lambda2 * gen_aug + diffusion_weight * diffusion``

* ``mmvae_plus``: negative MMVAE+ bound with self- and cross-reconstructions,
  auxiliary priors for the cross terms and a mixture-of-experts ``q(z | X)``.
* ``cross_mi``: negative InfoNCE between shared codes of every modality pair.
* ``gen_aug``: cycle-consistency on model-generated augmentations that swap
  ``z`` and ``w`` between two samples.
* ``diffusion``: denoising loss of the latent prior plus its terminal KL,
  standing in for ``E_q[-log p(z)]``.

All inputs are batched: ``xs`` is a list of ``M`` tensors of shape
``(batch, input_dim_m)``.
"""

from contextlib import nullcontext
from dataclasses import dataclass

import torch

from .distributions import MoEPosterior, moe_log_prob, standard_normal
from .errors import ConfigError, InputError, NumericError

GENAUG_VARIANTS = ("contrastive", "lsq")
COS_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 8.0
    lambda2: float = 2.0
    beta: float = 2.5
    genaug_variant: str = "contrastive"
    k_negatives: int = 16
    diffusion_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "beta", "diffusion_weight"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.genaug_variant not in GENAUG_VARIANTS:
            raise ConfigError(f"genaug_variant must be one of {GENAUG_VARIANTS}")
        if self.k_negatives < 1:
            raise ConfigError("k_negatives must be positive")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    mmvae_plus: torch.Tensor
    cross_mi: torch.Tensor
    gen_aug: torch.Tensor
    diffusion: torch.Tensor
    recon: torch.Tensor

    def as_dict(self):
        out = {k: float(getattr(self, k).detach())
               for k in ("total", "mmvae_plus", "cross_mi", "gen_aug", "diffusion")}
        out["recon"] = [float(r) for r in self.recon.detach()]
        return out

    def first_non_finite(self):
        for k in ("mmvae_plus", "cross_mi", "gen_aug", "diffusion", "total"):
            if not torch.isfinite(getattr(self, k)).all():
                return k
        return None


def _check_batch(xs, min_size=1):
    sizes = {x.shape[0] for x in xs}
    if len(sizes) != 1:
        raise InputError(f"misaligned batch: per-modality sizes {sorted(sizes)}")
    (b,) = sizes
    if b < min_size:
        raise InputError(f"batch size {b} < {min_size}")
    return b


def cosine(u, v):
    """Cosine similarity along the last axis; exact zero vectors raise."""
    nu, nv = u.norm(dim=-1), v.norm(dim=-1)
    if (nu == 0).any() or (nv == 0).any():
        raise NumericError("cosine similarity of a zero-norm vector")
    return (u * v).sum(-1) / (nu.clamp_min(COS_EPS) * nv.clamp_min(COS_EPS))


def contrast(anchor, positive, negatives):
    """InfoNCE term ``log phi(a, p) / (phi(a, p) + sum_j phi(a, n_j))``.

    The affinity is ``phi(u, v) = exp(cos(u, v))``. ``anchor`` and ``positive``
    have shape ``(..., d)``; ``negatives`` has shape ``(..., k, d)``. Returns a
    tensor of shape ``(...)`` with values in ``[-log(1 + k e^2), 0)``.
    """
    if negatives.dim() < 2 or negatives.shape[-2] < 1:
        raise InputError("need at least one negative")
    if not (anchor.shape[-1] == positive.shape[-1] == negatives.shape[-1]):
        raise InputError("anchor, positive and negatives must share a dimension")
    pos = cosine(anchor, positive)
    neg = cosine(anchor.unsqueeze(-2), negatives)
    logits = torch.cat([pos.unsqueeze(-1), neg], dim=-1)
    return pos - torch.logsumexp(logits, dim=-1)


def negative_indices(batch_size, k, noise):
    """``(batch, k)`` indices of negatives via ``k`` distinct cyclic offsets.

    Offsets are drawn without replacement from ``1..batch_size-1``, so no
    anchor is ever paired with itself.
    """
    if k >= batch_size:
        raise InputError(f"k_negatives={k} needs batch size > {k}, got {batch_size}")
    offsets = noise.permutation(batch_size - 1)[:k] + 1
    return (torch.arange(batch_size)[:, None] + offsets[None, :]) % batch_size


def _sample(q, noise):
    return q.sample(noise.normal(q.mean.shape, dtype=q.mean.dtype))


def _mmvae_plus_terms(model, xs, posteriors, noise, beta, z_route="moe"):
    """Per-sample MMVAE+ integrand, averaged over modalities.

    Draw order per modality ``m``: ``z``, ``w_m``, then ``w~_n`` for ``n != m``
    in increasing ``n``. With ``z_route="entropy"`` the ``log p(z) - log q(z|X)``
    pair is replaced by the closed-form entropy of ``q(z | x_m)``; the
    cross-entropy against the prior is then added separately.
    """
    M = model.n_modalities
    B = xs[0].shape[0]
    d_w = model.latent.d_w
    mixture = MoEPosterior([qz for qz, _ in posteriors])
    objectives, recon, z_samples = [], [], []
    for m in range(M):
        qz, qw = posteriors[m]
        z = _sample(qz, noise)
        w = _sample(qw, noise)
        z_samples.append(z)
        lik = model.log_likelihood(m, model.decode(m, z, w), xs[m])
        for n in range(M):
            if n == m:
                continue
            w_tilde = model.sample_aux_prior(n, noise.normal((B, d_w), dtype=z.dtype))
            lik = lik + model.log_likelihood(n, model.decode(n, z, w_tilde), xs[n])
        w_term = model.prior_w((B,)).log_prob(w) - qw.log_prob(w)
        if z_route == "moe":
            z_term = standard_normal(z.shape, dtype=z.dtype).log_prob(z) - moe_log_prob(mixture, z)
        elif z_route == "entropy":
            z_term = qz.entropy()
        else:
            raise ConfigError(f"unknown z_route {z_route!r}")
        objectives.append(lik + beta * (z_term + w_term))
        recon.append(-lik.mean())
    loss = -torch.stack(objectives).mean()
    return loss, torch.stack(recon), z_samples


def mmvae_plus_loss(model, xs, noise, beta=2.5, posteriors=None):
    """Negative MMVAE+ bound with a standard-normal ``p(z)``."""
    _check_batch(xs, min_size=2)
    if posteriors is None:
        posteriors = model.encode_all(xs)
    loss, _, _ = _mmvae_plus_terms(model, xs, posteriors, noise, beta)
    return loss


def cross_mi_loss(model, xs, noise, k=16, posteriors=None):
    """``-(2 / (M (M-1))) sum_{m<n} Contrast(z_m, z_n)`` averaged over the batch."""
    B = _check_batch(xs, min_size=2)
    if posteriors is None:
        posteriors = model.encode_all(xs)
    M = model.n_modalities
    zs = [_sample(qz, noise) for qz, _ in posteriors]
    idx = negative_indices(B, k, noise)
    total = 0.0
    for m in range(M):
        for n in range(m + 1, M):
            total = total + contrast(zs[m], zs[n], zs[n][idx]).mean()
    return -2.0 / (M * (M - 1)) * total


def gen_aug_loss(model, xs, noise, variant="contrastive", k=16, posteriors=None):
    """Redundancy removal through generated augmentations.

    Each ``x_m`` is paired with ``x'_m`` (the batch cyclically shifted by one).
    ``x+ = mean p(x_m | z_m, w'_m)`` is re-encoded and ``q(w_m | x+)`` is matched
    to ``q(w_m | x'_m)``; symmetrically ``mean p(x_m | z'_m, w_m)`` is re-encoded
    and its ``z`` posterior matched to ``q(z | x'_m)``. Matching is InfoNCE
    (negatives are re-encoded codes of other batch elements) or squared
    distance between posterior means.
    """
    if variant not in GENAUG_VARIANTS:
        raise ConfigError(f"unknown gen_aug variant {variant!r}")
    B = _check_batch(xs, min_size=2)
    if posteriors is None:
        posteriors = model.encode_all(xs)
    M = model.n_modalities
    idx = negative_indices(B, k, noise) if variant == "contrastive" else None
    total = 0.0
    for m in range(M):
        qz, qw = posteriors[m]
        z, w = _sample(qz, noise), _sample(qw, noise)
        z_shift, w_shift = z.roll(1, 0), w.roll(1, 0)

        x_plus_w = model.likelihood_mean(m, model.decode(m, z, w_shift))
        x_plus_z = model.likelihood_mean(m, model.decode(m, z_shift, w))
        _, qw_plus = model.encode(m, x_plus_w)
        qz_plus, _ = model.encode(m, x_plus_z)

        if variant == "lsq":
            loss_w = ((qw_plus.mean - qw.mean.roll(1, 0)) ** 2).sum(-1).mean()
            loss_z = ((qz_plus.mean - qz.mean.roll(1, 0)) ** 2).sum(-1).mean()
        else:
            w2 = _sample(qw_plus, noise)
            z2 = _sample(qz_plus, noise)
            loss_w = -contrast(w2, w_shift, w2[idx]).mean()
            loss_z = -contrast(z2, z_shift, z2[idx]).mean()
        total = total + loss_z + loss_w
    return total / (2.0 * M)


def total_loss(model, diffusion, xs, cfg, noise):
    """Full objective and its breakdown.

    When ``cfg.diffusion_weight > 0`` the shared-latent KL is split into the
    closed-form posterior entropy (inside ``mmvae_plus``) and the
    ``-log p(z)`` surrogate of ``diffusion`` on the posterior samples. Terms with zero weight
    are still evaluated for logging, without gradients.
    """
    B = _check_batch(xs, min_size=2)
    if cfg.k_negatives >= B:
        raise InputError(f"k_negatives={cfg.k_negatives} needs batch size > {cfg.k_negatives}")
    use_diffusion = cfg.diffusion_weight > 0
    if use_diffusion and diffusion is None:
        raise ConfigError("diffusion_weight > 0 but no diffusion prior given")
    posteriors = model.encode_all(xs)

    mm, recon, z_samples = _mmvae_plus_terms(
        model, xs, posteriors, noise, cfg.beta,
        z_route="entropy" if use_diffusion else "moe")

    with (nullcontext() if cfg.lambda1 > 0 else torch.no_grad()):
        cross = cross_mi_loss(model, xs, noise, cfg.k_negatives, posteriors=posteriors)
    with (nullcontext() if cfg.lambda2 > 0 else torch.no_grad()):
        gen = gen_aug_loss(model, xs, noise, cfg.genaug_variant, cfg.k_negatives,
                           posteriors=posteriors)
    if use_diffusion:
        diff = diffusion.nll_surrogate(torch.cat(z_samples, dim=0), noise)
    else:
        diff = torch.zeros((), dtype=mm.dtype)

    total = mm + cfg.lambda1 * cross + cfg.lambda2 * gen + cfg.diffusion_weight * diff
    return LossBreakdown(total=total, mmvae_plus=mm, cross_mi=cross, gen_aug=gen,
                         diffusion=diff, recon=recon)
