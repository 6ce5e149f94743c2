"""The acquisition model: blur, decimation and signal-dependent Gaussian noise.

A measurement is modelled as ``y = D(h * x) + w``, where ``h`` is the point spread function sampled at the target
resolution, ``D`` keeps one sample out of ``s`` along each axis and ``w`` is Gaussian noise with per-pixel variance
``sigma0**2 + K * D(h * x)``, approximating the Poisson-Gaussian noise of the sensor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage, optimize, signal

from satrestore.errors import ConfigError, DimensionError
from satrestore.imaging import (
    Kernel,
    as_image,
    convolve_circular,
    correlate_circular,
    downsample,
    quantize_12bit,
    upsample_adjoint,
)
from satrestore.io import read_kernel, write_kernel

if TYPE_CHECKING:
    from os import PathLike

    from numpy.typing import ArrayLike, NDArray

    from satrestore.imaging import ImageGrid, Rng

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
)

VARIANCE_FLOOR_RATIO = 1e-3
"""Noise variances below ``sigma0**2 * VARIANCE_FLOOR_RATIO`` are clamped to that value."""


@dataclass(frozen=True, eq=False)
class ForwardModel:
    """Degradation model of a single-band imaging instrument.

    Attributes
    ----------
    kernel : Kernel
        Point spread function sampled at the target resolution.
    scale : int
        Decimation factor between the target and the measurement grid: 1 for restoration, 2 for restoration with
        super-resolution. Defaults to 1.
    sigma0 : float
        Standard deviation of the signal-independent noise floor, in normalized units.
    k_gain : float
        Gain of the signal-dependent noise variance. Defaults to 0.
    quantize : bool
        If `True`, simulated measurements are rounded to the 12-bit grid. Defaults to `False`.
    include_variance_terms : bool
        If `False`, the log-determinant and the variance derivatives are dropped from the likelihood, which then
        becomes a weighted least-squares term. Defaults to `True`.

    Raises
    ------
    ConfigError
        If the scale is not 1 or 2, `sigma0` is not positive or `k_gain` is negative.
    """

    kernel: Kernel = field(default_factory=Kernel.identity)
    scale: int = 1
    sigma0: float = 1 / 4095
    k_gain: float = 0.0
    quantize: bool = False
    include_variance_terms: bool = True

    def __post_init__(self):
        if self.scale not in (1, 2):
            raise ConfigError(f"The scale must be 1 or 2, got {self.scale}.")
        if not self.sigma0 > 0:
            raise ConfigError(f"sigma0 must be positive, got {self.sigma0}.")
        if not self.k_gain >= 0:
            raise ConfigError(f"k_gain must be non-negative, got {self.k_gain}.")

    def measurement_shape(self, image_shape: tuple[int, int]) -> tuple[int, int]:
        """Shape of the measurement of an image of shape `image_shape`."""
        if image_shape[0] % self.scale or image_shape[1] % self.scale:
            raise DimensionError(f"Image dimensions {image_shape} are not divisible by the scale {self.scale}.")
        return image_shape[0] // self.scale, image_shape[1] // self.scale

    def image_shape(self, measurement_shape: tuple[int, int]) -> tuple[int, int]:
        """Shape of the target image of a measurement of shape `measurement_shape`."""
        return measurement_shape[0] * self.scale, measurement_shape[1] * self.scale

    def apply(self, x: ImageGrid | ArrayLike) -> NDArray[np.float64]:
        """Noiseless measurement ``D(h * x)``."""
        return downsample(convolve_circular(x, self.kernel), self.scale)

    def adjoint(self, r: ImageGrid | ArrayLike) -> NDArray[np.float64]:
        """Adjoint of `apply`, ``h^T * D^T r``."""
        return correlate_circular(upsample_adjoint(r, self.scale), self.kernel)

    def noise_variance(self, m: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
        """Per-pixel noise variance for the mean signal `m`, and the mask of pixels clamped to the floor."""
        variance = self.sigma0**2 + self.k_gain * m
        floor = self.sigma0**2 * VARIANCE_FLOOR_RATIO
        clamped = variance < floor

        return np.where(clamped, floor, variance), clamped

    @classmethod
    def from_json(cls, path: str | PathLike) -> ForwardModel:
        """Load a forward model from a JSON document.

        The document holds the keys ``kernel_file``, ``scale``, ``sigma0``, ``k_gain`` and ``quantize``, and optionally
        ``include_variance_terms``. The kernel file is an F32R raster; relative paths are resolved against the
        directory of the JSON document.

        Raises
        ------
        ConfigError
            If a required key is missing or a value is invalid.
        """
        path = Path(path)
        document = json.loads(path.read_text())

        try:
            kernel_path = Path(document["kernel_file"])
            kernel_path = kernel_path if kernel_path.is_absolute() else path.parent / kernel_path

            return cls(
                kernel=read_kernel(kernel_path),
                scale=int(document["scale"]),
                sigma0=float(document["sigma0"]),
                k_gain=float(document["k_gain"]),
                quantize=bool(document["quantize"]),
                include_variance_terms=bool(document.get("include_variance_terms", True)),
            )
        except KeyError as e:
            raise ConfigError(f"Forward model {path} is missing the key {e}.") from e

    def to_json(self, path: str | PathLike, kernel_file: str | None = None) -> None:
        """Save the forward model as a JSON document, with the kernel next to it.

        Parameters
        ----------
        path : str | PathLike
            Destination of the JSON document.
        kernel_file : str, optional
            File name of the kernel, relative to the directory of `path`. Defaults to ``<stem>_kernel.f32r``.
        """
        path = Path(path)
        kernel_file = kernel_file or f"{path.stem}_kernel.f32r"

        write_kernel(path.parent / kernel_file, self.kernel)
        document = {
            "kernel_file": kernel_file,
            "scale": self.scale,
            "sigma0": self.sigma0,
            "k_gain": self.k_gain,
            "quantize": self.quantize,
            "include_variance_terms": self.include_variance_terms,
        }
        path.write_text(json.dumps(document, indent=2))


@dataclass
class LikelihoodDiagnostics:
    """Counters collected while evaluating the likelihood.

    Attributes
    ----------
    evaluations : int
        Number of likelihood evaluations.
    clamped_pixels : int
        Total number of pixels whose noise variance was clamped to the floor.
    """

    evaluations: int = 0
    clamped_pixels: int = 0


def _validate_pair(x: NDArray[np.float64], y: NDArray[np.float64], fm: ForwardModel) -> None:
    expected = fm.measurement_shape(x.shape)
    if y.shape != expected:
        raise DimensionError(f"Measurement of shape {y.shape} does not match the image of shape {x.shape}.")


def likelihood_and_gradient(
    x: ImageGrid | ArrayLike,
    y: ImageGrid | ArrayLike,
    fm: ForwardModel,
    diagnostics: LikelihoodDiagnostics | None = None,
    *,
    with_gradient: bool = True,
) -> tuple[float, NDArray[np.float64] | None]:
    """Negative log-likelihood of `y` given `x` and, optionally, its gradient with respect to `x`.

    This is the shared implementation of `neg_log_likelihood` and `grad_neg_log_likelihood`; solvers that need both
    call it once per iterate.
    """
    x, y = as_image(x), as_image(y)
    _validate_pair(x, y, fm)

    m = fm.apply(x)
    variance, clamped = fm.noise_variance(m)
    residual = y - m

    value = 0.5 * np.sum(residual**2 / variance)
    if fm.include_variance_terms:
        value += 0.5 * np.sum(np.log(variance))

    if diagnostics is not None:
        diagnostics.evaluations += 1
        diagnostics.clamped_pixels += int(np.count_nonzero(clamped))

    if not with_gradient:
        return float(value), None

    d_m = -residual / variance
    if fm.include_variance_terms and fm.k_gain > 0:
        d_m += np.where(clamped, 0.0, 0.5 * fm.k_gain * (1 / variance - residual**2 / variance**2))

    return float(value), fm.adjoint(d_m)


def neg_log_likelihood(
    x: ImageGrid | ArrayLike,
    y: ImageGrid | ArrayLike,
    fm: ForwardModel,
    diagnostics: LikelihoodDiagnostics | None = None,
) -> float:
    """Negative log-likelihood of a measurement, up to an additive constant.

    Evaluates ``1/2 (y - m)^T S^-1 (y - m) + 1/2 log |S|`` with ``m = D(h * x)`` and the diagonal noise covariance
    ``S = diag(sigma0**2 + K m)``, dropping the constant ``N/2 log(2 pi)``.

    Parameters
    ----------
    x : ImageGrid | ArrayLike
        Image at the target resolution.
    y : ImageGrid | ArrayLike
        Measurement, `scale` times smaller than `x` along each axis.
    fm : ForwardModel
        The forward model.
    diagnostics : LikelihoodDiagnostics, optional
        Counters updated in place. Variances below ``sigma0**2 * 1e-3`` are clamped and counted.

    Returns
    -------
    float
        The negative log-likelihood.

    Raises
    ------
    DimensionError
        If the shapes of `x` and `y` do not match the forward model.
    """
    value, _ = likelihood_and_gradient(x, y, fm, diagnostics, with_gradient=False)
    return value


def grad_neg_log_likelihood(
    x: ImageGrid | ArrayLike,
    y: ImageGrid | ArrayLike,
    fm: ForwardModel,
    diagnostics: LikelihoodDiagnostics | None = None,
) -> NDArray[np.float64]:
    """Gradient of `neg_log_likelihood` with respect to every pixel of `x`.

    The residual term, the dependence of the variance on the signal and the log-determinant are all differentiated
    and back-propagated through the adjoints of the decimation and the blur. Clamped pixels use the clamped,
    constant variance.
    """
    _, gradient = likelihood_and_gradient(x, y, fm, diagnostics)
    return gradient


def degrade(x: ImageGrid | ArrayLike, fm: ForwardModel, rng: Rng) -> NDArray[np.float64]:
    """Simulate a measurement of `x`.

    Returns ``D(h * x) + w`` with ``w`` Gaussian of per-pixel variance ``sigma0**2 + K max(D(h * x), 0)``, rounded to
    the 12-bit grid when the model quantizes.

    Raises
    ------
    DimensionError
        If the image dimensions are not divisible by the scale.
    """
    m = fm.apply(x)
    variance = fm.sigma0**2 + fm.k_gain * np.maximum(m, 0)
    y = m + np.sqrt(variance) * rng.normal(m.shape)

    return quantize_12bit(y) if fm.quantize else y


@dataclass(frozen=True)
class MtfSpec:
    """Point spread function specified by its modulation transfer function.

    Attributes
    ----------
    mtf_at_nyquist : float
        Value of the MTF at half the sampling frequency, in (0, 1). Pleiades operates at 0.15.
    kernel_size : int
        Size of the square, odd kernel. Defaults to 15.
    """

    mtf_at_nyquist: float
    kernel_size: int = 15

    def __post_init__(self):
        if not 0 < self.mtf_at_nyquist < 1:
            raise ConfigError(f"The MTF at Nyquist must lie in (0, 1), got {self.mtf_at_nyquist}.")
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:  # noqa: PLR2004
            raise ConfigError(f"The kernel size must be an odd number of at least 3, got {self.kernel_size}.")


def _gaussian_taps(width: float, size: int) -> NDArray[np.float64]:
    offsets = np.arange(size) - size // 2
    profile = np.exp(-0.5 * (offsets / width) ** 2)
    taps = np.outer(profile, profile)

    return taps / taps.sum()


def _nyquist_response(taps: NDArray[np.float64]) -> float:
    signs = (-1.0) ** (np.arange(taps.shape[0]) - taps.shape[0] // 2)
    return float(np.sum(taps * signs[:, None]))


def measure_mtf(kernel: Kernel) -> float:
    """Magnitude of the kernel's discrete Fourier transform at the vertical Nyquist frequency."""
    shape = (2 * kernel.shape[0], 2 * kernel.shape[1])
    return float(np.abs(kernel.transfer_function(shape)[shape[0] // 2, 0]))


def psf_from_mtf(spec: MtfSpec) -> Kernel:
    """Isotropic Gaussian point spread function with a prescribed MTF at Nyquist.

    The width of a continuous Gaussian with the requested MTF is known in closed form. Sampling and truncation shift
    the response of the discrete kernel, so that width is only a starting point: the width of the sampled kernel is
    solved for with a bracketing root finder.

    Raises
    ------
    ConfigError
        If the requested MTF cannot be reached with the kernel size. The message gives the achievable range.
    """
    size = spec.kernel_size
    target = spec.mtf_at_nyquist

    def residual(width: float) -> float:
        return _nyquist_response(_gaussian_taps(width, size)) - target

    narrowest, widest = 1e-3, size / 6

    if residual(widest) >= 0:
        lowest = residual(widest) + target
        raise ConfigError(
            f"An MTF of {target} at Nyquist cannot be reached with a kernel of size {size}; "
            f"the achievable range is ({lowest:.4f}, 1)."
        )

    # The width of the continuous Gaussian splits the bracket
    closed_form = np.sqrt(-2 * np.log(target)) / np.pi
    if narrowest < closed_form < widest:
        if residual(closed_form) < 0:
            widest = closed_form
        else:
            narrowest = closed_form

    width = optimize.brentq(residual, narrowest, widest, xtol=1e-12)

    return Kernel(_gaussian_taps(width, size))


def anti_alias(x: ImageGrid | ArrayLike, factor: int) -> NDArray[np.float64]:
    """Low-pass filter an image before decimating it by `factor`.

    A separable windowed-sinc filter with its cutoff at the Nyquist frequency of the decimated grid is applied with
    periodic boundaries.
    """
    x = as_image(x)

    if factor == 1:
        return x.copy()

    taps = signal.firwin(8 * factor + 1, cutoff=1 / factor)
    filtered = ndimage.convolve1d(x, taps, axis=0, mode="wrap")

    return ndimage.convolve1d(filtered, taps, axis=1, mode="wrap")


def simulate_pair(
    clean_hi_res: ImageGrid | ArrayLike,
    fm: ForwardModel,
    target_scale: int,
    rng: Rng,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Simulate a (target, degraded) pair from a very high resolution image.

    The target is obtained by anti-aliasing and decimating the clean image by `target_scale`; the degraded image is
    a simulated measurement of the target. The measurement does not follow the restoration model exactly when the
    forward model quantizes.

    Parameters
    ----------
    clean_hi_res : ImageGrid | ArrayLike
        The clean image. Its dimensions must be divisible by ``target_scale * fm.scale``.
    fm : ForwardModel
        The forward model.
    target_scale : int
        Decimation factor between the clean image and the target.
    rng : Rng
        Source of the measurement noise.

    Returns
    -------
    tuple[np.ndarray, np.ndarray]
        The target and the degraded image.

    Raises
    ------
    DimensionError
        If the clean image dimensions are not divisible by ``target_scale * fm.scale``.
    """
    clean = as_image(clean_hi_res)
    total = target_scale * fm.scale

    if clean.shape[0] % total or clean.shape[1] % total:
        raise DimensionError(f"Image dimensions {clean.shape} are not divisible by {total}.")

    target = downsample(anti_alias(clean, target_scale), target_scale)

    return target, degrade(target, fm, rng)
