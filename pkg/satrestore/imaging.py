"""Rasters, kernels, circular convolution, integer resampling and random streams.

All arithmetic is done in 64-bit floating point. Images are normalized so that 1.0 corresponds to the digital count
4095 of a 12-bit sensor. Convolutions are circular (periodic), which makes every linear operator in this package
diagonal in the Fourier domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING, Any

import numpy as np
from scipy import fft, ndimage

from satrestore.errors import DataError, DimensionError

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

__all__ = (
    "DIGITAL_MAX",
    "TRANSFER_FUNCTION_CACHE_SIZE",
    "ImageGrid",
    "Kernel",
    "Rng",
    "as_image",
    "convolve_circular",
    "correlate_circular",
    "downsample",
    "fft2_real",
    "ifft2_real",
    "quantize_12bit",
    "upsample_adjoint",
    "upsample_bicubic",
)

DIGITAL_MAX = 4095
"""Largest digital count of a 12-bit sensor; the normalized value 1.0."""

TRANSFER_FUNCTION_CACHE_SIZE = 16
"""Number of image shapes for which each kernel keeps its transfer function."""


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Single-band raster with normalized values.

    The data are copied on construction and stored as a read-only, row-major float64 array, so an `ImageGrid` can be
    shared freely between threads. It implements the numpy array protocol, so ``np.asarray(grid)`` returns its data.

    Attributes
    ----------
    data : np.ndarray
        Two-dimensional array of finite values, nominally in [0, 1].

    Raises
    ------
    DimensionError
        If the data are not two-dimensional.
    DataError
        If the data contain NaN or infinite values.
    """

    data: NDArray[np.float64]

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)

        if data.ndim != 2:
            raise DimensionError(f"An image must be two-dimensional, got {data.ndim} dimensions.")
        if not np.all(np.isfinite(data)):
            raise DataError("An image must not contain NaN or infinite values.")

        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def __array__(self, dtype: Any = None, copy: bool | None = None) -> np.ndarray:
        if copy:
            return np.array(self.data, dtype=dtype)
        return np.asarray(self.data, dtype=dtype)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def from_counts(cls, counts: ArrayLike) -> ImageGrid:
        """Create an image from 12-bit digital counts. Counts above 4095 are clamped."""
        return cls(np.minimum(np.asarray(counts, dtype=np.float64), DIGITAL_MAX) / DIGITAL_MAX)

    def to_counts(self) -> NDArray[np.uint16]:
        """Convert to 12-bit digital counts, rounding and clamping to [0, 4095]."""
        return np.clip(np.round(self.data * DIGITAL_MAX), 0, DIGITAL_MAX).astype(np.uint16)


def as_image(x: ImageGrid | ArrayLike) -> NDArray[np.float64]:
    """Return the pixel values of `x` as a two-dimensional float64 array.

    Raises
    ------
    DimensionError
        If `x` is not two-dimensional.
    """
    image = np.asarray(x, dtype=np.float64)

    if image.ndim != 2:
        raise DimensionError(f"An image must be two-dimensional, got {image.ndim} dimensions.")

    return image


@dataclass(frozen=True, eq=False)
class Kernel:
    """Odd-sized convolution kernel with a well-defined center.

    Attributes
    ----------
    taps : np.ndarray
        Kernel coefficients. Both dimensions must be odd.
    normalized : bool
        If `True`, the taps must sum to 1 within 1e-9. Defaults to `True`.

    Raises
    ------
    DimensionError
        If the kernel is not two-dimensional or has an even dimension.
    DataError
        If the taps are not finite, or if a normalized kernel does not sum to 1.
    """

    taps: NDArray[np.float64]
    normalized: bool = True
    _cached_transfer_function: Any = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        taps = np.array(self.taps, dtype=np.float64)

        if taps.ndim != 2:
            raise DimensionError(f"A kernel must be two-dimensional, got {taps.ndim} dimensions.")
        if taps.shape[0] % 2 == 0 or taps.shape[1] % 2 == 0:
            raise DimensionError(f"Kernel dimensions must be odd, got {taps.shape}.")
        if not np.all(np.isfinite(taps)):
            raise DataError("A kernel must not contain NaN or infinite values.")
        if self.normalized and abs(taps.sum() - 1.0) > 1e-9:
            raise DataError(f"A normalized kernel must sum to 1, got {taps.sum()}.")

        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)
        object.__setattr__(
            self, "_cached_transfer_function", lru_cache(maxsize=TRANSFER_FUNCTION_CACHE_SIZE)(self._transfer_function)
        )

    @classmethod
    def identity(cls) -> Kernel:
        """The 1x1 identity kernel."""
        return cls(np.ones((1, 1)))

    @classmethod
    def from_array(cls, taps: ArrayLike, *, normalize: bool = True) -> Kernel:
        """Create a kernel from an array, optionally rescaling the taps to unit sum."""
        taps = np.asarray(taps, dtype=np.float64)

        if normalize:
            total = taps.sum()
            if total == 0:
                raise DataError("Cannot normalize a kernel whose taps sum to zero.")
            taps = taps / total

        return cls(taps, normalized=normalize)

    @property
    def shape(self) -> tuple[int, int]:
        return self.taps.shape

    @property
    def center(self) -> tuple[int, int]:
        return self.taps.shape[0] // 2, self.taps.shape[1] // 2

    def transfer_function(self, shape: tuple[int, int]) -> NDArray[np.complex128]:
        """Discrete Fourier transform of the kernel, zero-padded to `shape` with its center at the origin.

        The results for the last `TRANSFER_FUNCTION_CACHE_SIZE` shapes are cached.

        Raises
        ------
        DimensionError
            If the kernel is larger than `shape`.
        """
        return self._cached_transfer_function(int(shape[0]), int(shape[1]))

    def _transfer_function(self, height: int, width: int) -> NDArray[np.complex128]:
        if self.taps.shape[0] > height or self.taps.shape[1] > width:
            raise DimensionError(
                f"Kernel of size {self.taps.shape} does not fit in an image of size {(height, width)}."
            )

        padded = np.zeros((height, width))
        padded[: self.taps.shape[0], : self.taps.shape[1]] = self.taps
        padded = np.roll(padded, (-self.center[0], -self.center[1]), axis=(0, 1))
        transfer_function = fft.fft2(padded)
        transfer_function.setflags(write=False)

        return transfer_function


def _filter_circular(x: NDArray[np.float64], transfer_function: NDArray[np.complex128]) -> NDArray[np.float64]:
    half_spectrum = transfer_function[:, : x.shape[1] // 2 + 1]
    return fft.irfft2(fft.rfft2(x) * half_spectrum, s=x.shape)


def convolve_circular(x: ImageGrid | ArrayLike, h: Kernel) -> NDArray[np.float64]:
    """Circular convolution ``h * x``.

    Parameters
    ----------
    x : ImageGrid | ArrayLike
        The image.
    h : Kernel
        The kernel. It must fit within the image.

    Returns
    -------
    np.ndarray
        The filtered image, with the same size as `x`.

    Raises
    ------
    DimensionError
        If the kernel is larger than the image.
    """
    x = as_image(x)
    return _filter_circular(x, h.transfer_function(x.shape))


def correlate_circular(x: ImageGrid | ArrayLike, h: Kernel) -> NDArray[np.float64]:
    """Circular correlation with `h`, the adjoint of `convolve_circular`."""
    x = as_image(x)
    return _filter_circular(x, np.conj(h.transfer_function(x.shape)))


def _validate_factor(factor: int) -> int:
    if int(factor) != factor or factor < 1:
        raise DimensionError(f"The resampling factor must be a positive integer, got {factor}.")
    return int(factor)


def downsample(x: ImageGrid | ArrayLike, s: int) -> NDArray[np.float64]:
    """Decimate an image, keeping the top-left sample of each s x s block.

    No filtering is applied; anti-aliasing is the responsibility of the blur kernel.

    Raises
    ------
    DimensionError
        If the image dimensions are not divisible by `s`.
    """
    x = as_image(x)
    s = _validate_factor(s)

    if x.shape[0] % s or x.shape[1] % s:
        raise DimensionError(f"Image dimensions {x.shape} are not divisible by the factor {s}.")

    return x[::s, ::s].copy()


def upsample_adjoint(y: ImageGrid | ArrayLike, s: int) -> NDArray[np.float64]:
    """Zero-filling upsampling, the adjoint of `downsample`."""
    y = as_image(y)
    s = _validate_factor(s)

    out = np.zeros((y.shape[0] * s, y.shape[1] * s))
    out[::s, ::s] = y

    return out


def upsample_bicubic(y: ImageGrid | ArrayLike, s: int) -> NDArray[np.float64]:
    """Periodic cubic-spline interpolation by an integer factor.

    The interpolation grid is aligned with `downsample`, so that ``downsample(upsample_bicubic(y, s), s) == y``.
    """
    y = as_image(y)
    s = _validate_factor(s)

    if s == 1:
        return y.copy()

    rows, cols = np.meshgrid(np.arange(y.shape[0] * s) / s, np.arange(y.shape[1] * s) / s, indexing="ij")

    return ndimage.map_coordinates(y, [rows, cols], order=3, mode="grid-wrap")


def fft2_real(x: ImageGrid | ArrayLike) -> NDArray[np.complex128]:
    """Two-dimensional FFT of a real image, keeping the non-negative frequencies of the last axis."""
    return fft.rfft2(as_image(x))


def ifft2_real(spectrum: NDArray[np.complex128], shape: tuple[int, int]) -> NDArray[np.float64]:
    """Inverse of `fft2_real`. The original image `shape` is needed to resolve the width of the last axis."""
    return fft.irfft2(spectrum, s=shape)


def quantize_12bit(x: ImageGrid | ArrayLike) -> NDArray[np.float64]:
    """Round normalized values to the 12-bit grid, clamping to [0, 1]."""
    return np.clip(np.round(as_image(x) * DIGITAL_MAX), 0, DIGITAL_MAX) / DIGITAL_MAX


class Rng:
    """Reproducible random stream with independent substreams.

    Streams are backed by numpy's counter-based Philox bit generator, seeded through a `SeedSequence`. A substream
    is derived by extending the spawn key, so tile ``i`` of a job always gets the same noise, whatever the number of
    workers.

    Parameters
    ----------
    seed : int
        Non-negative 64-bit seed.
    spawn_key : tuple[int, ...], optional
        Substream path. Defaults to the root stream.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise DataError(f"The seed must be a 64-bit unsigned integer, got {seed}.")

        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        self._generator = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=self.spawn_key))
        )

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(seed={self.seed}, spawn_key={self.spawn_key})"

    def substream(self, index: int) -> Rng:
        """Independent stream number `index` below this one."""
        return Rng(self.seed, (*self.spawn_key, index))

    def uniform(self, size: int | tuple[int, ...], low: float = 0.0, high: float = 1.0) -> NDArray[np.float64]:
        return self._generator.uniform(low, high, size)

    def normal(self, size: int | tuple[int, ...]) -> NDArray[np.float64]:
        return self._generator.standard_normal(size)
