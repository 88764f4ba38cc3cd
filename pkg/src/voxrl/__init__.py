"""3D latent diffusion with multi-scale reward fine-tuning on phantom volumes."""

__version__ = "0.1.0"
