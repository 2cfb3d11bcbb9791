"""Joint identity-text encoder with contrastive pre-training and a
conditional denoising diffusion model, exercised on synthetic worlds."""

__version__ = "0.1.0"
