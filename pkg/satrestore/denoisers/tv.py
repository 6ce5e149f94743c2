"""Total variation denoising with Chambolle's dual projection algorithm."""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from satrestore.denoisers.base import BaseDenoiser, DenoiserSpec

if TYPE_CHECKING:
    from numpy.typing import NDArray

__all__ = ("TvDenoiser", "divergence", "gradient", "total_variation", "tv_prox")


def gradient(x: NDArray[np.float64]) -> NDArray[np.float64]:
    """Forward differences with Neumann boundaries, stacked along a new first axis."""
    out = np.zeros((2, *x.shape))
    out[0, :-1] = x[1:] - x[:-1]
    out[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return out


def divergence(p: NDArray[np.float64]) -> NDArray[np.float64]:
    """Discrete divergence, the negative adjoint of `gradient`."""
    rows, cols = p[0], p[1]

    out = np.zeros(p.shape[1:])
    out[0] += rows[0]
    out[1:-1] += rows[1:-1] - rows[:-2]
    out[-1] -= rows[-2]

    out[:, 0] += cols[:, 0]
    out[:, 1:-1] += cols[:, 1:-1] - cols[:, :-2]
    out[:, -1] -= cols[:, -2]
    return out


def total_variation(x: NDArray[np.float64]) -> float:
    """Isotropic total variation."""
    return float(np.sum(np.sqrt(np.sum(gradient(x) ** 2, axis=0))))


def tv_prox(f: NDArray[np.float64], weight: float, iterations: int = 30, step: float = 0.248) -> NDArray[np.float64]:
    """Approximate ``argmin_x 1/2 ||x - f||^2 + weight * TV(x)`` with a fixed number of dual iterations."""
    if weight <= 0:
        return f.copy()

    p = np.zeros((2, *f.shape))
    scaled = f / weight

    for _ in range(iterations):
        g = gradient(divergence(p) - scaled)
        p = (p + step * g) / (1 + step * np.sqrt(np.sum(g**2, axis=0)))

    return f - weight * divergence(p)


class TvDenoiser(BaseDenoiser):
    """Denoiser solving the TV proximal problem with weight ``weight_scale * sigma_d**2``."""

    def __init__(self, iterations: int = 30, step: float = 0.248, weight_scale: float = 30.0):
        self.iterations = iterations
        self.step = step
        self.weight_scale = weight_scale

    @classmethod
    def from_spec(cls, spec: DenoiserSpec) -> TvDenoiser:
        return cls(spec.tv_iterations, spec.tv_step, spec.tv_weight_scale)

    def _denoise(self, x: NDArray[np.float64], sigma_d: float) -> NDArray[np.float64]:
        return tv_prox(x, self.weight_scale * sigma_d**2, self.iterations, self.step)
