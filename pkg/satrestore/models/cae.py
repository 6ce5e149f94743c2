"""Generative image models for variational restoration.

A generative model maps latent variables ``(z, h)`` to a Gaussian distribution over images: the decoder gives the
mean ``D(z)`` and the variance decoder the per-pixel deviation ``sigma(z)``. The latent prior is
``p(z | h) p(h)``, with ``p(z | h)`` a factorized Gaussian whose mean and deviation are predicted from the hyper-latent
``h``, and ``p(h)`` standard normal.

Two implementations are provided: `CaeModel`, a compressive autoencoder with a hyperprior loaded from a weights
manifest, and `AnalyticCae`, a linear model with an orthogonal decoder for which posteriors are known exactly.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
from scipy import fft, linalg

from satrestore.errors import ConfigError, DimensionError, ManifestError
from satrestore.imaging import as_image
from satrestore.models.layers import Conv2d, Network, softplus, softplus_grad
from satrestore.models.manifest import load_manifest

if TYPE_CHECKING:
    from collections.abc import Callable
    from os import PathLike

    from numpy.typing import NDArray

    from satrestore.imaging import ImageGrid
    from satrestore.models.forward import ForwardModel

__all__ = (
    "AnalyticCae",
    "CaeModel",
    "GenerativeModel",
    "LatentPosterior",
    "load_cae",
)

CAE_NETWORKS = ("encoder", "decoder", "variance_decoder", "hyper_encoder", "hyper_decoder")

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


def _gaussian_logpdf(x: NDArray[np.float64], mean: NDArray[np.float64] | float, std: NDArray[np.float64] | float):
    return float(np.sum(-0.5 * ((x - mean) / std) ** 2 - np.log(std) - _LOG_SQRT_2PI))


class GenerativeModel(ABC):
    """Interface of the generative models used by the variational solvers.

    Images are two-dimensional arrays. The latent ``z`` and hyper-latent ``h`` are arrays whose shapes are given by
    `latent_shapes`.
    """

    @property
    @abstractmethod
    def downsampling_factor(self) -> int:
        """Total downsampling factor between the image and the coarsest latent. Image sizes must be multiples of it."""

    @abstractmethod
    def latent_shapes(self, image_shape: tuple[int, int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """Shapes of ``z`` and ``h`` for an image of shape `image_shape`."""

    @abstractmethod
    def encode(self, x: ImageGrid | NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Deterministic encoder means ``(z, h)`` of an image, without quantization noise."""

    @abstractmethod
    def decode(self, z: NDArray[np.float64], h: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Decoded image mean ``D(z)`` and per-pixel deviation ``sigma(z) > 0``."""

    @abstractmethod
    def vjp_latent(
        self,
        z: NDArray[np.float64],
        h: NDArray[np.float64],
        cotangent_mean: NDArray[np.float64],
        cotangent_sigma: NDArray[np.float64],
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Vector-Jacobian product of `decode` with respect to ``(z, h)``, the weights being constants."""

    @abstractmethod
    def latent_prior_logpdf(self, z: NDArray[np.float64], h: NDArray[np.float64]) -> float:
        """``log p(z | h) + log p(h)``, summed over all entries."""

    @abstractmethod
    def latent_prior_grad(
        self, z: NDArray[np.float64], h: NDArray[np.float64]
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Gradient of `latent_prior_logpdf` with respect to ``(z, h)``."""

    def decode_with_vjp(
        self, z: NDArray[np.float64], h: NDArray[np.float64]
    ) -> tuple[NDArray[np.float64], NDArray[np.float64], Callable]:
        """Decode and return a function computing `vjp_latent` at ``(z, h)`` from the two output cotangents."""
        mean, sigma = self.decode(z, h)

        def vjp(cotangent_mean, cotangent_sigma):
            return self.vjp_latent(z, h, cotangent_mean, cotangent_sigma)

        return mean, sigma, vjp

    def check_image_shape(self, image_shape: tuple[int, int]) -> None:
        """Raise a `DimensionError` if the image dimensions are not multiples of the downsampling factor."""
        factor = self.downsampling_factor
        if image_shape[0] % factor or image_shape[1] % factor:
            raise DimensionError(
                f"Image dimensions {tuple(image_shape)} must be multiples of the model's downsampling factor {factor}."
            )


def _conv_strides(network: Network) -> int:
    factor = 1
    for layer in network.layers:
        if isinstance(layer, Conv2d):
            factor *= layer.stride
    return factor


@dataclass(frozen=True, eq=False)
class CaeModel(GenerativeModel):
    """Compressive autoencoder with a hyperprior.

    Attributes
    ----------
    encoder : Network
        Maps a one-channel image to the latent ``z``.
    decoder : Network
        Maps ``z`` to the one-channel image mean.
    variance_decoder : Network
        Maps ``z`` to the raw image deviation; the deviation is its softplus.
    hyper_encoder : Network
        Maps ``z`` to the hyper-latent ``h``.
    hyper_decoder : Network
        Maps ``h`` to ``2 C`` channels: the mean of ``z`` followed by its raw deviation, mapped through softplus.

    Raises
    ------
    DimensionError
        If the networks do not fit together. The message names the first inconsistent network.
    """

    encoder: Network
    decoder: Network
    variance_decoder: Network
    hyper_encoder: Network
    hyper_decoder: Network

    def __post_init__(self):
        factor = self.downsampling_factor
        sample_shape = (1, 4 * factor, 4 * factor)

        z_shape = self.encoder.output_shape(sample_shape)
        for network in (self.decoder, self.variance_decoder):
            if network.output_shape(z_shape) != sample_shape:
                raise DimensionError(
                    f"Network '{network.name}' maps latents of shape {z_shape} to {network.output_shape(z_shape)}, "
                    f"expected {sample_shape}."
                )

        h_shape = self.hyper_encoder.output_shape(z_shape)
        expected = (2 * z_shape[0], *z_shape[1:])
        if self.hyper_decoder.output_shape(h_shape) != expected:
            raise DimensionError(
                f"Network '{self.hyper_decoder.name}' maps hyper-latents of shape {h_shape} to "
                f"{self.hyper_decoder.output_shape(h_shape)}, expected {expected}."
            )

    @property
    def downsampling_factor(self) -> int:
        return _conv_strides(self.encoder) * _conv_strides(self.hyper_encoder)

    def latent_shapes(self, image_shape: tuple[int, int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
        self.check_image_shape(image_shape)
        z_shape = self.encoder.output_shape((1, *image_shape))

        return z_shape, self.hyper_encoder.output_shape(z_shape)

    def encode(self, x: ImageGrid | NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        x = as_image(x)
        self.check_image_shape(x.shape)

        z = self.encoder.forward(x[None])
        return z, self.hyper_encoder.forward(z)

    def decode(self, z: NDArray[np.float64], h: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        return self.decoder.forward(z)[0], softplus(self.variance_decoder.forward(z))[0]

    def decode_with_vjp(
        self, z: NDArray[np.float64], h: NDArray[np.float64]
    ) -> tuple[NDArray[np.float64], NDArray[np.float64], Callable]:
        mean, mean_vjp = self.decoder.forward_with_vjp(z)
        raw, raw_vjp = self.variance_decoder.forward_with_vjp(z)

        def vjp(cotangent_mean, cotangent_sigma):
            grad_z = mean_vjp(cotangent_mean[None]) + raw_vjp((cotangent_sigma * softplus_grad(raw[0]))[None])
            return grad_z, np.zeros_like(h)

        return mean[0], softplus(raw)[0], vjp

    def vjp_latent(
        self,
        z: NDArray[np.float64],
        h: NDArray[np.float64],
        cotangent_mean: NDArray[np.float64],
        cotangent_sigma: NDArray[np.float64],
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        _, _, vjp = self.decode_with_vjp(z, h)
        return vjp(cotangent_mean, cotangent_sigma)

    def latent_distribution(self, h: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Mean and deviation of ``p(z | h)``."""
        out = self.hyper_decoder.forward(h)
        channels = out.shape[0] // 2
        return out[:channels], softplus(out[channels:])

    def latent_prior_logpdf(self, z: NDArray[np.float64], h: NDArray[np.float64]) -> float:
        mean, std = self.latent_distribution(h)
        return _gaussian_logpdf(z, mean, std) + _gaussian_logpdf(h, 0.0, 1.0)

    def latent_prior_grad(
        self, z: NDArray[np.float64], h: NDArray[np.float64]
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        out, vjp = self.hyper_decoder.forward_with_vjp(h)
        channels = out.shape[0] // 2
        mean, raw = out[:channels], out[channels:]
        std = softplus(raw)

        standardized = (z - mean) / std
        grad_mean = standardized / std
        grad_std = (standardized**2 - 1) / std

        grad_h = vjp(np.concatenate([grad_mean, grad_std * softplus_grad(raw)])) - h
        return -grad_mean, grad_h


def load_cae(manifest_path: str | PathLike) -> CaeModel:
    """Load a compressive autoencoder from a weights manifest.

    The manifest must define the networks ``encoder``, ``decoder``, ``variance_decoder``, ``hyper_encoder`` and
    ``hyper_decoder``.

    Raises
    ------
    ManifestError
        If the manifest cannot be loaded, misses a network, or if the networks do not fit together.
    """
    manifest = load_manifest(manifest_path)
    networks = {name: manifest.network(name) for name in CAE_NETWORKS}

    try:
        return CaeModel(**networks)
    except DimensionError as e:
        raise ManifestError(f"Invalid shape chain in {manifest_path}: {e}") from e


class LatentPosterior(NamedTuple):
    """Gaussian distribution over the latent of an `AnalyticCae`."""

    mean: NDArray[np.float64]
    """Posterior mean, with the shape of the latent."""
    covariance: NDArray[np.float64]
    """Posterior covariance of the flattened latent."""


@dataclass(frozen=True)
class AnalyticCae(GenerativeModel):
    """Linear generative model with an orthogonal block-DCT decoder.

    The latent of an image of shape (M, N) has shape ``(b**2, M / b, N / b)``: channel ``u * b + v`` holds the DCT
    coefficient ``(u, v)`` of every ``b x b`` block. The decoder ``D(z) = W z`` is the orthonormal inverse block DCT,
    so ``W^T W = I``; the image deviation is the constant `gamma` and the prior of ``z`` is ``N(0, tau**2 I)``. There
    is no hyper-latent: ``h`` is an empty array.

    Attributes
    ----------
    block_size : int
        DCT block size ``b``. Defaults to 4.
    tau : float
        Deviation of the latent prior. Defaults to 1.
    gamma : float
        Deviation of the image given the latent. Defaults to 0.01.
    """

    block_size: int = 4
    tau: float = 1.0
    gamma: float = 0.01

    def __post_init__(self):
        if self.block_size < 1:
            raise ConfigError(f"The block size must be positive, got {self.block_size}.")
        if not self.tau > 0 or not self.gamma > 0:
            raise ConfigError(f"tau and gamma must be positive, got {self.tau} and {self.gamma}.")

    @property
    def downsampling_factor(self) -> int:
        return self.block_size

    def latent_shapes(self, image_shape: tuple[int, int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
        self.check_image_shape(image_shape)
        b = self.block_size
        return (b * b, image_shape[0] // b, image_shape[1] // b), (0,)

    def _analysis(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        b = self.block_size
        rows, cols = x.shape[0] // b, x.shape[1] // b

        coefficients = fft.dctn(x.reshape(rows, b, cols, b), axes=(1, 3), norm="ortho")
        return coefficients.transpose(1, 3, 0, 2).reshape(b * b, rows, cols)

    def _synthesis(self, z: NDArray[np.float64]) -> NDArray[np.float64]:
        b = self.block_size
        if z.ndim != 3 or z.shape[0] != b * b:  # noqa: PLR2004
            raise DimensionError(f"Latent of shape {z.shape} does not match a block size of {b}.")

        rows, cols = z.shape[1:]
        blocks = z.reshape(b, b, rows, cols).transpose(2, 0, 3, 1)
        return fft.idctn(blocks, axes=(1, 3), norm="ortho").reshape(rows * b, cols * b)

    def encode(self, x: ImageGrid | NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        x = as_image(x)
        self.check_image_shape(x.shape)
        return self._analysis(x), np.zeros(0)

    def decode(self, z: NDArray[np.float64], h: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        mean = self._synthesis(z)
        return mean, np.full(mean.shape, self.gamma)

    def vjp_latent(
        self,
        z: NDArray[np.float64],
        h: NDArray[np.float64],
        cotangent_mean: NDArray[np.float64],
        cotangent_sigma: NDArray[np.float64],
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        return self._analysis(as_image(cotangent_mean)), np.zeros_like(h)

    def latent_prior_logpdf(self, z: NDArray[np.float64], h: NDArray[np.float64]) -> float:
        return _gaussian_logpdf(z, 0.0, self.tau)

    def latent_prior_grad(
        self, z: NDArray[np.float64], h: NDArray[np.float64]
    ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        return -z / self.tau**2, np.zeros_like(h)

    def transform_matrix(self, image_shape: tuple[int, int]) -> NDArray[np.float64]:
        """Dense matrix ``W`` of the decoder, mapping flattened latents to flattened images."""
        z_shape, _ = self.latent_shapes(image_shape)
        size = int(np.prod(z_shape))

        basis = np.eye(size).reshape(size, *z_shape)
        return np.stack([self._synthesis(e).ravel() for e in basis], axis=1)

    def exact_posterior(self, y: ImageGrid | NDArray[np.float64], fm: ForwardModel) -> LatentPosterior:
        """Exact Gaussian posterior of the latent given a measurement, when the image is the decoder mean.

        For ``x = W z``, ``z ~ N(0, tau**2 I)`` and ``y = A x + w`` with white noise of deviation ``sigma0``, the
        posterior has precision ``W^T A^T A W / sigma0**2 + I / tau**2`` and mean
        ``(W^T A^T A W / sigma0**2 + I / tau**2)^-1 W^T A^T y / sigma0**2``. The system is solved densely.

        Raises
        ------
        ConfigError
            If the forward model has signal-dependent noise.
        """
        if fm.k_gain != 0:
            raise ConfigError("The exact posterior requires a forward model with k_gain = 0.")

        y = as_image(y)
        image_shape = fm.image_shape(y.shape)
        z_shape, _ = self.latent_shapes(image_shape)

        # Columns of A W: the measurement of each latent basis vector
        decoder = self.transform_matrix(image_shape)
        system = np.stack([fm.apply(column.reshape(image_shape)).ravel() for column in decoder.T], axis=1)

        precision = system.T @ system / fm.sigma0**2 + np.eye(system.shape[1]) / self.tau**2
        factor = linalg.cho_factor(precision)
        mean = linalg.cho_solve(factor, system.T @ y.ravel() / fm.sigma0**2)
        covariance = linalg.cho_solve(factor, np.eye(system.shape[1]))

        return LatentPosterior(mean.reshape(z_shape), covariance)
