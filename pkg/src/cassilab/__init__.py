"""Desk-scale laboratory for coded-aperture snapshot spectral imaging.

Simulate the compressive forward model, reconstruct spectral cubes with an
unfolded solver whose prior is a continuous spectral field, and render
intensity planes at arbitrary in-range wavelengths.
"""

from .cube import SpectralCube
from .pipeline import TrainConfig, build_model, render, train
from .sensing import CodedMask, DispersionModel, Measurement, SensingOperator, generate_mask

__version__ = "0.1.0"

__all__ = [
    "SpectralCube",
    "TrainConfig",
    "build_model",
    "render",
    "train",
    "CodedMask",
    "DispersionModel",
    "Measurement",
    "SensingOperator",
    "generate_mask",
]
