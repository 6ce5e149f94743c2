from __future__ import annotations

from satrestore import denoisers, metrics, models, plots, solvers, tiling, uncertainty
from satrestore.config import JobConfig, load_job_config
from satrestore.denoisers import DenoiserSpec
from satrestore.imaging import ImageGrid, Kernel, Rng
from satrestore.io import read_image, write_image
from satrestore.models import ForwardModel, MtfSpec, psf_from_mtf
from satrestore.solvers import DpirConfig, VbleConfig, fit, restore, sample_posterior

__all__ = (
    "models",
    "ForwardModel",
    "MtfSpec",
    "psf_from_mtf",
    "denoisers",
    "DenoiserSpec",
    "solvers",
    "DpirConfig",
    "VbleConfig",
    "restore",
    "fit",
    "sample_posterior",
    "ImageGrid",
    "Kernel",
    "Rng",
    "read_image",
    "write_image",
    "JobConfig",
    "load_job_config",
    "metrics",
    "uncertainty",
    "plots",
    "tiling",
)

__version__ = "0.1.0"
