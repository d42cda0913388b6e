"""Few-shot diffusion fine-tuning at desk scale, with Bayesian (mean-field) weights."""

__version__ = "0.1.0"
