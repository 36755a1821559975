"""Image-data MLOps toolkit: latent fingerprints, strategy ranking, AutoML runs and drift-triggered retraining."""

__version__ = "0.1.0"
