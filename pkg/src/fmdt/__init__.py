"""Flow matching viewed as denoising: closed forms, training, sampling and diagnostics."""

__version__ = "0.1.0"

from .core import (Dataset, Denoiser, VelocityField, corrupt, corrupt_classical,  # noqa: E402
                   denoiser_from_velocity, identity_denoiser, interpolate, sigma_to_t, t_to_sigma,
                   velocity_from_denoiser)

__all__ = [
    "Dataset", "Denoiser", "VelocityField", "corrupt", "corrupt_classical",
    "denoiser_from_velocity", "identity_denoiser", "interpolate", "sigma_to_t", "t_to_sigma",
    "velocity_from_denoiser",
]
