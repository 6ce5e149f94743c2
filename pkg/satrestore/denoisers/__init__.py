from __future__ import annotations

from satrestore.denoisers.base import BaseDenoiser, DenoiserKind, DenoiserSpec, denoise, make_denoiser
from satrestore.denoisers.cnn import load_cnn_denoiser

__all__ = (
    "BaseDenoiser",
    "DenoiserKind",
    "DenoiserSpec",
    "denoise",
    "make_denoiser",
    "load_cnn_denoiser",
)
