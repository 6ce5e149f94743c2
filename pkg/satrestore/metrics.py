"""Image quality metrics."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

from satrestore.errors import DimensionError
from satrestore.imaging import as_image

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from satrestore.imaging import ImageGrid

__all__ = ("PSNR_CAP", "psnr", "ssim")

PSNR_CAP = 99.0
"""PSNR reported for images whose mean square error is below 1e-12."""

SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a: ImageGrid | ArrayLike, b: ImageGrid | ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"Images of shapes {a.shape} and {b.shape} cannot be compared.")
    return a, b


def psnr(a: ImageGrid | ArrayLike, b: ImageGrid | ArrayLike, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio ``10 log10(peak**2 / MSE)``, in dB, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))

    if mse < 1e-12:  # noqa: PLR2004
        return PSNR_CAP

    return min(10 * np.log10(peak**2 / mse), PSNR_CAP)


def ssim(a: ImageGrid | ArrayLike, b: ImageGrid | ArrayLike, peak: float = 1.0) -> float:
    """Mean structural similarity.

    Local statistics are computed with an 11 x 11 Gaussian window of deviation 1.5 and periodic boundaries, with the
    stabilizing constants ``(0.01 peak)**2`` and ``(0.03 peak)**2``.
    """
    a, b = _pair(a, b)

    def local_mean(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=3.5, mode="wrap")

    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a**2
    var_b = local_mean(b * b) - mu_b**2
    covariance = local_mean(a * b) - mu_a * mu_b

    similarity = ((2 * mu_a * mu_b + c1) * (2 * covariance + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )

    return float(np.mean(similarity))
