"""Denoisers evaluated by a convolutional network loaded from a weights manifest."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from satrestore.denoisers.base import BaseDenoiser, DenoiserKind, DenoiserSpec
from satrestore.errors import ManifestError
from satrestore.models.manifest import load_manifest

if TYPE_CHECKING:
    from os import PathLike

    from numpy.typing import NDArray

    from satrestore.models.layers import Network

__all__ = ("CnnDenoiser", "load_cnn_denoiser")

DENOISER_NETWORK = "denoiser"


class CnnDenoiser(BaseDenoiser):
    """Denoiser network with two input channels, the image and a constant plane holding the noise level.

    Raises
    ------
    ManifestError
        If the network does not map two channels to one.
    """

    def __init__(self, network: Network):
        if network.in_channels != 2 or network.out_channels != 1:  # noqa: PLR2004
            raise ManifestError(
                f"A denoiser network must map 2 channels to 1, network '{network.name}' maps "
                f"{network.in_channels} to {network.out_channels}."
            )
        self.network = network

    @classmethod
    def from_spec(cls, spec: DenoiserSpec) -> CnnDenoiser:
        return cls(load_manifest(spec.manifest).network(DENOISER_NETWORK))

    def _denoise(self, x: NDArray[np.float64], sigma_d: float) -> NDArray[np.float64]:
        inputs = np.stack([x, np.full(x.shape, sigma_d)])
        return self.network.forward(inputs)[0]


def load_cnn_denoiser(manifest_path: str | PathLike) -> DenoiserSpec:
    """Validate a denoiser weights manifest and return the spec selecting it.

    The manifest must define a network called ``denoiser``. Loading it here surfaces missing or corrupt weights before
    any solve starts.

    Raises
    ------
    ManifestError
        If the manifest or its blob is missing, corrupt or describes an unsupported network.
    """
    CnnDenoiser(load_manifest(manifest_path).network(DENOISER_NETWORK))
    return DenoiserSpec(kind=DenoiserKind.LOADED_CNN, manifest=str(manifest_path))
