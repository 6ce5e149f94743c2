from __future__ import annotations

import importlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import TYPE_CHECKING

from satrestore.errors import ConfigError
from satrestore.imaging import as_image

if TYPE_CHECKING:
    import numpy as np
    from numpy.typing import ArrayLike, NDArray

    from satrestore.imaging import ImageGrid

__all__ = (
    "BaseDenoiser",
    "DenoiserKind",
    "DenoiserSpec",
    "denoise",
    "make_denoiser",
)


class DenoiserKind(str, Enum):
    TV_CHAMBOLLE = "tv_chambolle"
    DCT_SHRINKAGE = "dct_shrinkage"
    LOADED_CNN = "loaded_cnn"


_DENOISER_CLASSES = {
    DenoiserKind.TV_CHAMBOLLE: ("satrestore.denoisers.tv", "TvDenoiser"),
    DenoiserKind.DCT_SHRINKAGE: ("satrestore.denoisers.dct", "DctDenoiser"),
    DenoiserKind.LOADED_CNN: ("satrestore.denoisers.cnn", "CnnDenoiser"),
}


@dataclass(frozen=True)
class DenoiserSpec:
    """Choice and parameters of a Gaussian denoiser.

    Only the parameters of the selected kind are used.

    Attributes
    ----------
    kind : DenoiserKind | str
        The denoiser. Defaults to `DenoiserKind.TV_CHAMBOLLE`.
    tv_iterations : int
        Number of dual projection iterations. Defaults to 30.
    tv_step : float
        Dual step size, at most 1/4. Defaults to 0.248.
    tv_weight_scale : float
        The TV weight is ``tv_weight_scale * sigma_d**2``. Defaults to 30.
    dct_block_size : int
        Size of the DCT blocks. Defaults to 8.
    dct_stride : int
        Distance between overlapping blocks. Must divide the block size. Defaults to 4.
    dct_threshold_scale : float
        The soft threshold is ``dct_threshold_scale * sigma_d``. Defaults to 2.7.
    manifest : str, optional
        Weights manifest of a loaded network.

    Raises
    ------
    ConfigError
        If the kind is unknown, a parameter is out of range, or a loaded network has no manifest.
    """

    kind: DenoiserKind | str = DenoiserKind.TV_CHAMBOLLE
    tv_iterations: int = 30
    tv_step: float = 0.248
    tv_weight_scale: float = 30.0
    dct_block_size: int = 8
    dct_stride: int = 4
    dct_threshold_scale: float = 2.7
    manifest: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", DenoiserKind(self.kind))
        except ValueError:
            raise ConfigError(
                f"Unknown denoiser '{self.kind}', expected one of {', '.join(k.value for k in DenoiserKind)}."
            ) from None

        if self.tv_iterations < 1:
            raise ConfigError(f"tv_iterations must be positive, got {self.tv_iterations}.")
        if not 0 < self.tv_step <= 0.25:  # noqa: PLR2004
            raise ConfigError(f"tv_step must lie in (0, 0.25], got {self.tv_step}.")
        if self.dct_stride < 1 or self.dct_block_size % self.dct_stride:
            raise ConfigError(
                f"dct_stride must divide dct_block_size, got {self.dct_stride} and {self.dct_block_size}."
            )
        if self.kind == DenoiserKind.LOADED_CNN and not self.manifest:
            raise ConfigError("A loaded_cnn denoiser needs a weights manifest.")


class BaseDenoiser(ABC):
    """Gaussian denoiser conditioned on the noise level.

    Denoisers are immutable after construction and can be called concurrently.
    """

    def denoise(self, x: ImageGrid | ArrayLike, sigma_d: float) -> NDArray[np.float64]:
        """Denoise an image corrupted by white Gaussian noise of deviation `sigma_d`.

        Raises
        ------
        ConfigError
            If `sigma_d` is outside (0, 1].
        """
        if not 0 < sigma_d <= 1:
            raise ConfigError(f"The noise level must lie in (0, 1], got {sigma_d}.")

        return self._denoise(as_image(x), float(sigma_d))

    @abstractmethod
    def _denoise(self, x: NDArray[np.float64], sigma_d: float) -> NDArray[np.float64]: ...

    @classmethod
    @abstractmethod
    def from_spec(cls, spec: DenoiserSpec) -> BaseDenoiser: ...


@lru_cache(maxsize=8)
def make_denoiser(spec: DenoiserSpec) -> BaseDenoiser:
    """Create the denoiser described by `spec`.

    Denoisers are cached per spec, so a network is loaded once however many tiles use it.

    Raises
    ------
    ManifestError
        If the weights of a loaded network are missing or corrupt.
    """
    module_name, class_name = _DENOISER_CLASSES[spec.kind]
    denoiser_class = getattr(importlib.import_module(module_name), class_name)

    return denoiser_class.from_spec(spec)


def denoise(x: ImageGrid | ArrayLike, sigma_d: float, spec: DenoiserSpec) -> NDArray[np.float64]:
    """Denoise `x` at noise level `sigma_d` with the denoiser described by `spec`."""
    return make_denoiser(spec).denoise(x, sigma_d)
