import numpy as np
import pytest
import torch
import torch.nn as nn

from idmvae.diffusion import DiffusionPrior, fit_prior
from idmvae.model import LatentSpec, ModalitySpec, MultimodalModel
from idmvae.noise import NoiseSource

torch.set_num_threads(1)


class SliceNet(nn.Module):
    """Frozen toy modality: ``x = [z; w]``, encoder slices, decoder concatenates.

    ``decoder_matrix`` swaps the identity decoder for a fixed linear map and
    ``ignore_w`` zeroes the private half of the decoder output.
    """

    def __init__(self, d_z, d_w, log_var=0.0, decoder_matrix=None, ignore_w=False):
        super().__init__()
        self.d_z, self.d_w = d_z, d_w
        self.log_var = log_var
        self.ignore_w = ignore_w
        if decoder_matrix is None:
            self.input_dim = d_z + d_w
            self.decoder_matrix = None
        else:
            self.register_buffer("decoder_matrix", torch.as_tensor(decoder_matrix, dtype=torch.float64))
            self.input_dim = self.decoder_matrix.shape[0]

    def encode(self, x):
        z, w = x[..., :self.d_z], x[..., self.d_z:self.d_z + self.d_w]
        return z, torch.full_like(z, self.log_var), w, torch.full_like(w, self.log_var)

    def decode(self, zw):
        if self.ignore_w:
            zw = torch.cat([zw[..., :self.d_z], torch.zeros_like(zw[..., self.d_z:])], dim=-1)
        if self.decoder_matrix is None:
            return zw
        return zw @ self.decoder_matrix.T


def toy_model(M=2, d_z=2, d_w=2, log_var=0.0, likelihood="gaussian", **net_kw):
    latent = LatentSpec(d_z, d_w, M)
    nets = [SliceNet(d_z, d_w, log_var, **net_kw) for _ in range(M)]
    specs = [ModalitySpec(n.input_dim, likelihood, 1.0) for n in nets]
    return MultimodalModel(latent, specs, nets=nets).double()


def tiny_model(M=2, input_dim=6, d_z=2, d_w=2, hidden=8, likelihood="gaussian", seed=0,
               separate_encoders=True):
    torch.manual_seed(seed)
    latent = LatentSpec(d_z, d_w, M)
    specs = [ModalitySpec(input_dim, likelihood, 1.0) for _ in range(M)]
    model = MultimodalModel(latent, specs, hidden=hidden, separate_encoders=separate_encoders).double()
    with torch.no_grad():
        # small random aux log-variances so their gradients are non-trivial
        model.aux_log_var.copy_(0.1 * torch.randn(M, d_w, dtype=torch.float64))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def finite_difference_check(loss_fn, params, step=1e-5):
    """Max relative error between autograd and central differences over ``params``.

    ``loss_fn`` must be deterministic (re-seed noise inside it).
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        # unused parameters get no grad; their numeric derivative must then be 0
        analytic = (torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()).reshape(-1)
        numeric = torch.zeros_like(analytic)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
            numeric[i] = (up - down) / (2 * step)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-6)
        worst = max(worst, (analytic - numeric).norm().item() / denom)
    return worst


def train_diffusion_on(data, seed=0, steps=10_000, **prior_kw):
    torch.manual_seed(seed)
    prior = DiffusionPrior(data.shape[1], **prior_kw)
    fit_prior(prior, data, NoiseSource(seed), steps=steps)
    return prior


def gmm_two_sample_check(seed, n=10_000, steps=10_000):
    """Fit the prior alone to a +-2 / sigma 0.5 mixture and test its samples."""
    r = np.random.default_rng(seed)
    data = np.where(r.random(n) < 0.5, -2.0, 2.0) + 0.5 * r.normal(size=n)
    prior = train_diffusion_on(torch.tensor(data, dtype=torch.float32)[:, None], seed, steps)
    s = prior.sample(n, NoiseSource(1000 + seed)).numpy()[:, 0]
    pos, neg = s[s > 0], s[s < 0]
    out = {"frac_pos": len(pos) / n, "frac_neg": len(neg) / n,
           "mean_pos": float(pos.mean()) if len(pos) else float("nan"),
           "mean_neg": float(neg.mean()) if len(neg) else float("nan")}
    out["pass"] = bool(min(out["frac_pos"], out["frac_neg"]) >= 0.45
                       and abs(out["mean_pos"] - 2) < 0.2 and abs(out["mean_neg"] + 2) < 0.2)
    return out


# acceptance criterion number -> result line, filled by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
