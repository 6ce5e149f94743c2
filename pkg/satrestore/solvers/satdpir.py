"""Plug-and-play restoration by half-quadratic splitting.

The restored image minimizes ``-log p(y | x) + lambda * phi(x)``, where the regularizer ``phi`` is only known through a
Gaussian denoiser. Splitting introduces an auxiliary image ``u`` and alternates a data-fit step,

    x_k = argmin_x -log p(y | x) + mu_k / 2 ||x - u_{k-1}||^2,

with a denoising step ``u_k = denoise(x_k, sigma_d(k))``, where ``mu_k = lambda / sigma_d(k)**2`` and ``sigma_d``
decreases geometrically from ``sigma1`` to the noise floor of the sensor.

The data-fit step is exact with gradient descent on the signal-dependent likelihood, or approximated in closed form by
freezing the noise variance at ``sigma0**2 + K * mean(u)``. The accelerated two-phase mode uses the closed form for the
first half of the iterations, and refines it with a few gradient steps in the second half.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
import pandas as pd
from scipy import fft

from satrestore.denoisers.base import BaseDenoiser, DenoiserSpec, make_denoiser
from satrestore.errors import ConfigError, DimensionError
from satrestore.imaging import as_image, upsample_bicubic
from satrestore.models.forward import likelihood_and_gradient
from satrestore.solvers.base import ensure_finite, solver

if TYPE_CHECKING:
    from os import PathLike

    from numpy.typing import ArrayLike, NDArray

    from satrestore.imaging import ImageGrid
    from satrestore.models.forward import ForwardModel

__all__ = (
    "DpirConfig",
    "DpirMode",
    "ProxResult",
    "RestoreReport",
    "noise_schedule",
    "prox_datafit_exact",
    "prox_datafit_fixed_sigma",
    "restore",
)

logger = logging.getLogger(__name__)

STEP_FLOOR = 1e-12
"""Gradient descent stalls when backtracking shrinks the step below this fraction of the initial step."""

CONVERGED_UPDATE = 1e-12
"""Gradient descent stops when a full step changes no pixel by more than this."""


class DpirMode(str, Enum):
    DPIR_FULL_GD = "dpir_full_gd"
    SATDPIR_TWO_PHASE = "satdpir_two_phase"


@dataclass(frozen=True)
class DpirConfig:
    """Parameters of the plug-and-play solver.

    Attributes
    ----------
    n_iters : int
        Number of splitting iterations, at least 2. Defaults to 8.
    sigma1 : float
        First denoising level, in normalized units. Defaults to 20/255.
    lam : float
        Regularization weight. Defaults to 0.23.
    mode : DpirMode | str
        `DpirMode.SATDPIR_TWO_PHASE` or `DpirMode.DPIR_FULL_GD`. Defaults to the two-phase mode.
    phase2_gd_iters : int
        Gradient steps per data-fit step in the second phase. Defaults to 5.
    phase2_step : float, optional
        Gradient step size. Defaults to ``1 / L`` with ``L = max|H|**2 / sigma0**2 + mu_k``.
    full_gd_iters : int
        Gradient steps per data-fit step in `DpirMode.DPIR_FULL_GD`. Defaults to 100.
    skip_gd_when_fixed_variance : bool
        If `True`, no gradient steps are taken when the noise variance does not depend on the signal, since the
        closed form is then exact. Defaults to `False`.

    Raises
    ------
    ConfigError
        If a parameter is out of range.
    """

    n_iters: int = 8
    sigma1: float = 20 / 255
    lam: float = 0.23
    mode: DpirMode | str = DpirMode.SATDPIR_TWO_PHASE
    phase2_gd_iters: int = 5
    phase2_step: float | None = None
    full_gd_iters: int = 100
    skip_gd_when_fixed_variance: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", DpirMode(self.mode))
        except ValueError:
            raise ConfigError(
                f"Unknown solver mode '{self.mode}', expected one of {', '.join(m.value for m in DpirMode)}."
            ) from None

        if self.n_iters < 2:  # noqa: PLR2004
            raise ConfigError(f"n_iters must be at least 2, got {self.n_iters}.")
        if not 0 < self.sigma1 <= 1:
            raise ConfigError(f"sigma1 must lie in (0, 1], got {self.sigma1}.")
        if not self.lam > 0:
            raise ConfigError(f"lam must be positive, got {self.lam}.")
        if self.phase2_gd_iters < 0 or self.full_gd_iters < 0:
            raise ConfigError("The numbers of gradient steps must be non-negative.")
        if self.phase2_step is not None and not self.phase2_step > 0:
            raise ConfigError(f"phase2_step must be positive, got {self.phase2_step}.")


def noise_schedule(cfg: DpirConfig, sigma2: float) -> NDArray[np.float64]:
    """Denoising levels, evenly spaced in log scale from ``cfg.sigma1`` down to `sigma2`.

    The endpoints are exactly ``cfg.sigma1`` and `sigma2`.

    Raises
    ------
    ConfigError
        If `sigma2` is not in (0, sigma1).
    """
    if not 0 < sigma2 < cfg.sigma1:
        raise ConfigError(f"The final noise level must lie in (0, {cfg.sigma1}), got {sigma2}.")

    schedule = np.geomspace(cfg.sigma1, sigma2, cfg.n_iters)
    schedule[0], schedule[-1] = cfg.sigma1, sigma2

    return schedule


def _block_mean(spectrum: NDArray, s: int) -> NDArray:
    height, width = spectrum.shape
    return spectrum.reshape(s, height // s, s, width // s).mean(axis=(0, 2))


def prox_datafit_fixed_sigma(
    y: ImageGrid | ArrayLike,
    u: ImageGrid | ArrayLike,
    mu: float,
    sigma_bar: float,
    fm: ForwardModel,
) -> NDArray[np.float64]:
    """Exact minimizer of ``1 / (2 sigma_bar**2) ||y - D(h * x)||^2 + mu / 2 ||x - u||^2``.

    The normal equations are solved in the Fourier domain. Decimation by ``s`` folds the spectrum onto ``s**2``
    aliased bands, which makes the system block diagonal; with ``alpha = mu * sigma_bar**2`` and
    ``R = h^T * D^T y + alpha u``,

        X = (R_hat - conj(H) * tile(mean_bands(H * R_hat) / (mean_bands(|H|**2) + alpha))) / alpha

    which reduces to ``R_hat / (|H|**2 + alpha)`` without decimation.

    Raises
    ------
    ConfigError
        If `mu` or `sigma_bar` is not positive.
    DimensionError
        If `y` and `u` do not match the forward model.
    """
    if not mu > 0 or not sigma_bar > 0:
        raise ConfigError(f"mu and sigma_bar must be positive, got {mu} and {sigma_bar}.")

    y, u = as_image(y), as_image(u)
    s = fm.scale
    if fm.measurement_shape(u.shape) != y.shape:
        raise DimensionError(f"Measurement of shape {y.shape} does not match the image of shape {u.shape}.")

    alpha = mu * sigma_bar**2
    transfer_function = fm.kernel.transfer_function(u.shape)
    rhs = fft.fft2(fm.adjoint(y) + alpha * u)

    if s == 1:
        solution = rhs / (np.abs(transfer_function) ** 2 + alpha)
    else:
        folded = _block_mean(transfer_function * rhs, s) / (_block_mean(np.abs(transfer_function) ** 2, s) + alpha)
        solution = (rhs - np.conj(transfer_function) * np.tile(folded, (s, s))) / alpha

    return fft.ifft2(solution).real


class ProxResult(NamedTuple):
    """Result of `prox_datafit_exact`."""

    x: NDArray[np.float64]
    """The final iterate."""
    objective: float
    """Objective at the final iterate."""
    iterations: int
    """Number of accepted gradient steps."""
    stalled: bool
    """Whether backtracking collapsed the step before all gradient steps were taken."""


def _lipschitz_step(fm: ForwardModel, mu: float, shape: tuple[int, int]) -> float:
    gain = np.max(np.abs(fm.kernel.transfer_function(shape)) ** 2)
    return 1.0 / (gain / fm.sigma0**2 + mu)


def prox_datafit_exact(
    y: ImageGrid | ArrayLike,
    u: ImageGrid | ArrayLike,
    mu: float,
    fm: ForwardModel,
    x_init: ImageGrid | ArrayLike,
    n_gd: int,
    step: float | None = None,
) -> ProxResult:
    """Gradient descent on ``-log p(y | x) + mu / 2 ||x - u||^2``, starting from `x_init`.

    Each step is halved until the objective does not increase. Descent stops early when a full step no longer changes
    the iterate, and stalls when the step falls below 1e-12 times its initial value.

    Parameters
    ----------
    y, u : ImageGrid | ArrayLike
        Measurement and auxiliary image.
    mu : float
        Weight of the proximity term.
    fm : ForwardModel
        The forward model.
    x_init : ImageGrid | ArrayLike
        Starting point, typically the closed-form step with a frozen variance.
    n_gd : int
        Maximum number of gradient steps.
    step : float, optional
        Initial step size. Defaults to ``1 / (max|H|**2 / sigma0**2 + mu)``.

    Returns
    -------
    ProxResult
        The final iterate with its objective, the number of steps and the stall flag.
    """
    y, u = as_image(y), as_image(u)
    x = np.array(as_image(x_init))

    def evaluate(candidate):
        value, gradient = likelihood_and_gradient(candidate, y, fm)
        difference = candidate - u
        return value + 0.5 * mu * np.sum(difference**2), gradient + mu * difference

    value, gradient = evaluate(x)
    initial_step = step if step is not None else _lipschitz_step(fm, mu, x.shape)
    step = initial_step

    for iteration in range(n_gd):
        if np.max(np.abs(step * gradient)) < CONVERGED_UPDATE:
            return ProxResult(x, value, iteration, stalled=False)

        while step >= STEP_FLOOR * initial_step:
            candidate = x - step * gradient
            candidate_value, candidate_gradient = evaluate(candidate)
            if np.isfinite(candidate_value) and candidate_value <= value:
                break
            step /= 2
        else:
            logger.debug("Gradient descent stalled after %d steps", iteration)
            return ProxResult(x, value, iteration, stalled=True)

        x, value, gradient = candidate, candidate_value, candidate_gradient

    return ProxResult(x, value, n_gd, stalled=False)


@dataclass(frozen=True)
class RestoreReport:
    """Per-iteration record of a restoration.

    Attributes
    ----------
    iterations : pd.DataFrame
        One row per iteration, with the columns ``iteration``, ``sigma_d``, ``mu``, ``sigma_bar2``,
        ``gd_iterations``, ``objective``, ``stalled`` and ``seconds``.
    """

    iterations: pd.DataFrame

    @property
    def stalled_iterations(self) -> int:
        return int(self.iterations["stalled"].sum())

    @property
    def seconds(self) -> float:
        return float(self.iterations["seconds"].sum())

    def to_dict(self) -> dict:
        return {
            "stalled_iterations": self.stalled_iterations,
            "seconds": self.seconds,
            "iterations": self.iterations.to_dict(orient="records"),
        }

    def to_json(self, path: str | PathLike) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, default=float)


def _gd_iterations(cfg: DpirConfig, fm: ForwardModel, iteration: int) -> int:
    if cfg.skip_gd_when_fixed_variance and fm.k_gain == 0:
        return 0

    if cfg.mode == DpirMode.DPIR_FULL_GD:
        return cfg.full_gd_iters

    return 0 if iteration < math.ceil(cfg.n_iters / 2) else cfg.phase2_gd_iters


@solver
def restore(
    y: ImageGrid | ArrayLike,
    fm: ForwardModel,
    denoiser: DenoiserSpec | BaseDenoiser,
    cfg: DpirConfig | None = None,
    *,
    return_report: bool = False,
) -> tuple[NDArray[np.float64], RestoreReport]:
    """Restore an image with plug-and-play half-quadratic splitting.

    The auxiliary image is initialized with `y`, upsampled with periodic cubic splines when the forward model
    decimates. Each iteration freezes the noise variance at ``sigma0**2 + K * mean(h * u)``, solves the data-fit step
    in closed form, optionally refines it with gradient descent on the exact likelihood, and denoises the result.

    Parameters
    ----------
    y : ImageGrid | ArrayLike
        The measurement.
    fm : ForwardModel
        The forward model. Its `sigma0` is the final denoising level.
    denoiser : DenoiserSpec | BaseDenoiser
        The denoiser, or its spec.
    cfg : DpirConfig, optional
        Solver parameters. Defaults to `DpirConfig()`.
    return_report : bool
        If `True`, also return a `RestoreReport`. Defaults to `False`.

    Returns
    -------
    np.ndarray | tuple[np.ndarray, RestoreReport]
        The restored image, which is the last denoised auxiliary image, and optionally the report.

    Raises
    ------
    ConfigError
        If ``cfg.sigma1`` does not exceed the noise floor ``fm.sigma0``.
    DimensionError
        If the kernel does not fit in the image.
    NumericalError
        If an iterate becomes non-finite.
    """
    cfg = cfg or DpirConfig()
    y = as_image(y)
    denoiser = make_denoiser(denoiser) if isinstance(denoiser, DenoiserSpec) else denoiser

    schedule = noise_schedule(cfg, fm.sigma0)
    kernel_gain = float(fm.kernel.taps.sum())
    u = upsample_bicubic(y, fm.scale)

    rows = []
    for k, sigma_d in enumerate(schedule):
        start = time.perf_counter()

        mu = cfg.lam / sigma_d**2
        sigma_bar2 = fm.sigma0**2 + fm.k_gain * max(kernel_gain * float(np.mean(u)), 0.0)

        x = prox_datafit_fixed_sigma(y, u, mu, math.sqrt(sigma_bar2), fm)

        n_gd = _gd_iterations(cfg, fm, k)
        if n_gd:
            result = prox_datafit_exact(y, u, mu, fm, x, n_gd, cfg.phase2_step)
            x, objective, gd_iterations, stalled = result
        else:
            value, _ = likelihood_and_gradient(x, y, fm, with_gradient=False)
            objective = value + 0.5 * mu * float(np.sum((x - u) ** 2))
            gd_iterations, stalled = 0, False

        ensure_finite(x, f"data-fit step of iteration {k}")
        u = ensure_finite(denoiser.denoise(x, sigma_d), f"denoised image of iteration {k}")

        rows.append(
            {
                "iteration": k,
                "sigma_d": float(sigma_d),
                "mu": mu,
                "sigma_bar2": sigma_bar2,
                "gd_iterations": gd_iterations,
                "objective": float(objective),
                "stalled": stalled,
                "seconds": time.perf_counter() - start,
            }
        )
        logger.debug(
            "Iteration %d: sigma_d=%.5g, mu=%.5g, %d gradient steps, objective %.6g",
            k,
            sigma_d,
            mu,
            gd_iterations,
            objective,
        )

    report = RestoreReport(pd.DataFrame(rows))
    if report.stalled_iterations:
        logger.info("Gradient descent stalled in %d of %d iterations", report.stalled_iterations, cfg.n_iters)

    return u, report
