"""Dance-to-music latent diffusion at desk scale."""

__version__ = "0.1.0"
