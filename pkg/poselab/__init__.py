"""PoseLab - multi-object 6-DoF pose estimation from a conditional VAE latent space."""

__version__ = "0.1.0"
