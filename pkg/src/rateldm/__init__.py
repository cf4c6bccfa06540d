"""Desk-scale text-to-audio latent diffusion conditioned on sampling rate."""

__version__ = "0.1.0"

from .dsp import RATE_CONFIGS, RATE_SET, MelSpectrogram, RateConfig, Waveform

__all__ = [
    "RATE_CONFIGS",
    "RATE_SET",
    "MelSpectrogram",
    "RateConfig",
    "Waveform",
    "__version__",
]
