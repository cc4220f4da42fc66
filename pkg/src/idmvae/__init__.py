"""Information-disentangled multimodal VAE with a latent diffusion prior."""

__version__ = "0.1.0"
