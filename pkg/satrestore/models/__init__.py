from __future__ import annotations

from satrestore.models.cae import AnalyticCae, CaeModel, GenerativeModel, LatentPosterior, load_cae
from satrestore.models.forward import (
    ForwardModel,
    LikelihoodDiagnostics,
    MtfSpec,
    anti_alias,
    degrade,
    grad_neg_log_likelihood,
    measure_mtf,
    neg_log_likelihood,
    psf_from_mtf,
    simulate_pair,
)
from satrestore.models.layers import Network
from satrestore.models.manifest import load_manifest, save_manifest

__all__ = (
    "ForwardModel",
    "LikelihoodDiagnostics",
    "MtfSpec",
    "anti_alias",
    "degrade",
    "grad_neg_log_likelihood",
    "measure_mtf",
    "neg_log_likelihood",
    "psf_from_mtf",
    "simulate_pair",
    "Network",
    "load_manifest",
    "save_manifest",
    "GenerativeModel",
    "CaeModel",
    "AnalyticCae",
    "LatentPosterior",
    "load_cae",
)
