"""In-context segmentation by conditional latent denoising."""

__version__ = "0.1.0"
