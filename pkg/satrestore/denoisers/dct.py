"""Denoising by soft thresholding of overlapping block DCT coefficients."""

from __future__ import annotations

from itertools import product
from typing import TYPE_CHECKING

import numpy as np
from scipy import fft

from satrestore.denoisers.base import BaseDenoiser, DenoiserSpec

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = ("DctDenoiser",)


class DctDenoiser(BaseDenoiser):
    """Soft thresholding of block DCT coefficients, averaged over shifted block grids.

    The image is reflect-padded to a multiple of the block size. For every shift of the block grid by a multiple of
    the stride, the coefficients of each block except the DC are soft-thresholded at ``threshold_scale * sigma_d``;
    the shifts wrap around, so every pixel is covered by the same number of blocks and the estimates are averaged with
    uniform weights. The result is clipped to ``[min(x) - sigma_d, max(x) + sigma_d]``.
    """

    def __init__(self, block_size: int = 8, stride: int = 4, threshold_scale: float = 2.7):
        self.block_size = block_size
        self.stride = stride
        self.threshold_scale = threshold_scale

    @classmethod
    def from_spec(cls, spec: DenoiserSpec) -> DctDenoiser:
        return cls(spec.dct_block_size, spec.dct_stride, spec.dct_threshold_scale)

    def _shrink_blocks(self, x: NDArray[np.float64], threshold: float) -> NDArray[np.float64]:
        b = self.block_size
        rows, cols = x.shape[0] // b, x.shape[1] // b

        coefficients = fft.dctn(x.reshape(rows, b, cols, b), axes=(1, 3), norm="ortho")
        dc = coefficients[:, 0, :, 0].copy()
        coefficients = np.sign(coefficients) * np.maximum(np.abs(coefficients) - threshold, 0)
        coefficients[:, 0, :, 0] = dc

        return fft.idctn(coefficients, axes=(1, 3), norm="ortho").reshape(x.shape)

    def _denoise(self, x: NDArray[np.float64], sigma_d: float) -> NDArray[np.float64]:
        b = self.block_size
        height, width = x.shape
        padded = np.pad(x, ((0, -height % b), (0, -width % b)), mode="reflect" if min(x.shape) > 1 else "edge")

        threshold = self.threshold_scale * sigma_d
        offsets = range(0, b, self.stride)

        estimate = np.zeros_like(padded)
        for dy, dx in product(offsets, offsets):
            shifted = np.roll(padded, (-dy, -dx), axis=(0, 1))
            estimate += np.roll(self._shrink_blocks(shifted, threshold), (dy, dx), axis=(0, 1))
        estimate /= len(offsets) ** 2

        return np.clip(estimate[:height, :width], x.min() - sigma_d, x.max() + sigma_d)
