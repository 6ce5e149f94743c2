"""Variational posterior sampling in the latent space of a generative model.

The posterior of the latent is approximated by a factorized uniform distribution,
``q(z) = prod_k U(z_k; [z_bar_k - a_k / 2, z_bar_k + a_k / 2])``, and likewise for the hyper-latent. In the joint mode
the image is also random given the latent, ``q(x | z) = prod_i N(D(z)_i, b_i**2 sigma(z)_i**2)``. The parameters
maximize the weighted evidence lower bound

    E_q[log p(y | x)] + lambda * (E_q[log p(z, h)] + sum log a + sum log a_h + sum (log b - b**2 / 2)),

estimated by Monte Carlo through the reparameterizations ``z = z_bar + a u`` with ``u ~ U(-1/2, 1/2)`` and
``x = D(z) + b sigma(z) eps`` with ``eps ~ N(0, I)``, and ascended with Adam. Constants are dropped from the bound.
Draws can be paired with their mirror images ``(-u, -eps)``; the bound is then estimated without bias and the
gradient of the latent means is exact whenever the log-densities are quadratic.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, fields
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from satrestore.errors import ConfigError, DataError
from satrestore.imaging import Rng, as_image, upsample_bicubic
from satrestore.models.forward import likelihood_and_gradient
from satrestore.solvers.base import solver

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import ArrayLike, NDArray

    from satrestore.imaging import ImageGrid
    from satrestore.models.cae import GenerativeModel
    from satrestore.models.forward import ForwardModel

__all__ = (
    "BResolution",
    "FitReport",
    "VariationalState",
    "VbleConfig",
    "VbleMode",
    "elbo_estimate",
    "fit",
    "mmse_and_quantiles",
    "posterior_deviation",
    "sample_posterior",
)

logger = logging.getLogger(__name__)

REJECTED_STEPS_WARNING_RATIO = 0.1
"""Fits rejecting more than this fraction of steps are flagged."""

_LATENT_STREAM = 0
_IMAGE_STREAM = 1


class VbleMode(str, Enum):
    VBLE = "vble"
    VBLE_XZ = "vble_xz"


class BResolution(str, Enum):
    PIXEL = "pixel"
    CHANNEL = "channel"


@dataclass(frozen=True)
class VbleConfig:
    """Parameters of the variational solver.

    Attributes
    ----------
    mode : VbleMode | str
        `VbleMode.VBLE` for a latent-only posterior, `VbleMode.VBLE_XZ` for the joint latent-image posterior.
        Defaults to `VbleMode.VBLE`.
    lam : float
        Weight of the prior and entropy terms; 1 is the Bayesian bound. Defaults to 0.6.
    n_opt_iters : int
        Number of optimization steps. Defaults to 1000.
    mc_samples_per_step : int
        Monte Carlo samples per gradient estimate. Defaults to 1.
    step_size : float
        Adam step size. Defaults to 1e-2.
    beta1, beta2 : float
        Adam moment decay rates. Default to 0.9 and 0.999.
    eps : float
        Adam stabilizer. Defaults to 1e-8.
    final_step_ratio : float
        Ratio of the last to the first step size, with exponential decay in between. Defaults to 1 (constant step).
    n_posterior_samples : int
        Number of posterior samples drawn after fitting. Defaults to 100.
    seed : int
        Seed of the random stream. Defaults to 0.
    b_resolution : BResolution | str
        A deviation scale per pixel, or a single one for the channel. Defaults to `BResolution.PIXEL`.
    b_init : float
        Initial deviation scale. Defaults to 1.
    freeze_b : bool
        If `True`, the deviation scale is not optimized and its terms are left out of the bound; `b_init` may then
        be 0. Defaults to `False`.
    a_init : float
        Initial width of the uniform latent distributions. Defaults to 1, the width of the quantization noise the
        autoencoder is trained with.
    antithetic : bool
        If `True`, each Monte Carlo draw is evaluated together with its mirror image. Defaults to `True`.

    Raises
    ------
    ConfigError
        If a parameter is out of range.
    """

    mode: VbleMode | str = VbleMode.VBLE
    lam: float = 0.6
    n_opt_iters: int = 1000
    mc_samples_per_step: int = 1
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    final_step_ratio: float = 1.0
    n_posterior_samples: int = 100
    seed: int = 0
    b_resolution: BResolution | str = BResolution.PIXEL
    b_init: float = 1.0
    freeze_b: bool = False
    a_init: float = 1.0
    antithetic: bool = True

    def __post_init__(self):
        for name, enum in (("mode", VbleMode), ("b_resolution", BResolution)):
            try:
                object.__setattr__(self, name, enum(getattr(self, name)))
            except ValueError:
                raise ConfigError(
                    f"Unknown {name} '{getattr(self, name)}', expected one of {', '.join(e.value for e in enum)}."
                ) from None

        if not self.lam > 0:
            raise ConfigError(f"lam must be positive, got {self.lam}.")
        if self.n_opt_iters < 1 or self.mc_samples_per_step < 1 or self.n_posterior_samples < 1:
            raise ConfigError("n_opt_iters, mc_samples_per_step and n_posterior_samples must be positive.")
        if not self.step_size > 0 or not self.final_step_ratio > 0:
            raise ConfigError("step_size and final_step_ratio must be positive.")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"The moment decay rates must lie in [0, 1), got {self.beta1} and {self.beta2}.")
        if not self.a_init > 0:
            raise ConfigError(f"a_init must be positive, got {self.a_init}.")
        if self.b_init < 0 or (self.b_init == 0 and not self.freeze_b):
            raise ConfigError(f"b_init must be positive unless b is frozen, got {self.b_init}.")


@dataclass
class VariationalState:
    """Parameters of the variational distribution, with widths in log scale.

    The same structure holds gradients, the ``log_*`` fields then being derivatives with respect to the logarithms.

    Attributes
    ----------
    z_bar : np.ndarray
        Latent means.
    log_a : np.ndarray
        Logarithm of the latent widths.
    h_bar : np.ndarray
        Hyper-latent means.
    log_a_h : np.ndarray
        Logarithm of the hyper-latent widths.
    log_b : np.ndarray
        Logarithm of the image deviation scales: an image-shaped field, or a (1, 1) array broadcast over the image.
    """

    z_bar: NDArray[np.float64]
    log_a: NDArray[np.float64]
    h_bar: NDArray[np.float64]
    log_a_h: NDArray[np.float64]
    log_b: NDArray[np.float64]

    @property
    def a(self) -> NDArray[np.float64]:
        return np.exp(self.log_a)

    @property
    def a_h(self) -> NDArray[np.float64]:
        return np.exp(self.log_a_h)

    @property
    def b(self) -> NDArray[np.float64]:
        return np.exp(self.log_b)

    def arrays(self) -> dict[str, NDArray[np.float64]]:
        return {field.name: getattr(self, field.name) for field in fields(self)}

    def copy(self) -> VariationalState:
        return VariationalState(**{name: array.copy() for name, array in self.arrays().items()})

    def zeros_like(self) -> VariationalState:
        return VariationalState(**{name: np.zeros_like(array) for name, array in self.arrays().items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(array)) for array in self.arrays().values())


def _sum_to_shape(field: NDArray[np.float64], shape: tuple[int, ...]) -> NDArray[np.float64]:
    if field.shape == shape:
        return field
    return np.full(shape, np.sum(field))


def elbo_estimate(
    state: VariationalState,
    y: ImageGrid | ArrayLike,
    fm: ForwardModel,
    model: GenerativeModel,
    lam: float,
    rng: Rng,
    mode: VbleMode | str = VbleMode.VBLE,
    mc_samples: int = 1,
    *,
    freeze_b: bool = False,
    antithetic: bool = False,
) -> tuple[float, VariationalState]:
    """Monte Carlo estimate of the weighted evidence lower bound and of its gradient.

    The estimate is unbiased and depends on `rng` only through its seed and spawn key: latent noise comes from its
    substream 0 and image noise from its substream 1, so repeated calls with the same `rng` use common random numbers.

    Parameters
    ----------
    state : VariationalState
        The variational parameters.
    y : ImageGrid | ArrayLike
        The measurement.
    fm : ForwardModel
        The forward model.
    model : GenerativeModel
        The generative model.
    lam : float
        Weight of the prior and entropy terms.
    rng : Rng
        Source of the reparameterization noise.
    mode : VbleMode | str
        In `VbleMode.VBLE` the image is the decoder mean and the ``b`` terms are absent. Defaults to `VbleMode.VBLE`.
    mc_samples : int
        Number of samples averaged. Defaults to 1.
    freeze_b : bool
        If `True`, the ``b`` terms are left out and their gradient is zero. Defaults to `False`.
    antithetic : bool
        If `True`, each sample is also evaluated at its mirror image ``(-u, -u_h, -eps)``, doubling the number of
        decoder evaluations. Defaults to `False`.

    Returns
    -------
    tuple[float, VariationalState]
        The estimate, up to additive constants, and its gradient.
    """
    mode = VbleMode(mode)
    y = as_image(y)
    joint = mode == VbleMode.VBLE_XZ

    a, a_h, b = state.a, state.a_h, state.b
    latent_rng, image_rng = rng.substream(_LATENT_STREAM), rng.substream(_IMAGE_STREAM)

    signs = (1.0, -1.0) if antithetic else (1.0,)
    image_shape = fm.image_shape(y.shape)

    value = 0.0
    grads = state.zeros_like()

    for _ in range(mc_samples):
        u_draw = latent_rng.uniform(state.z_bar.shape, -0.5, 0.5)
        u_h_draw = latent_rng.uniform(state.h_bar.shape, -0.5, 0.5)
        eps_draw = image_rng.normal(image_shape) if joint else None

        for sign in signs:
            u, u_h = sign * u_draw, sign * u_h_draw
            z = state.z_bar + a * u
            h = state.h_bar + a_h * u_h

            mean, sigma, vjp = model.decode_with_vjp(z, h)
            if joint:
                eps = sign * eps_draw
                x = mean + b * sigma * eps
            else:
                x = mean

            neg_log_likelihood, grad_x = likelihood_and_gradient(x, y, fm)
            prior_z, prior_h = model.latent_prior_grad(z, h)

            # Derivatives of the bound, ascending
            d_x = -grad_x
            grad_z, grad_h = vjp(d_x, d_x * b * eps if joint else np.zeros_like(mean))
            grad_z = grad_z + lam * prior_z
            grad_h = grad_h + lam * prior_h

            value += -neg_log_likelihood + lam * model.latent_prior_logpdf(z, h)
            grads.z_bar += grad_z
            grads.log_a += grad_z * u * a
            grads.h_bar += grad_h
            grads.log_a_h += grad_h * u_h * a_h
            if joint and not freeze_b:
                grads.log_b += _sum_to_shape(d_x * sigma * eps * b, state.log_b.shape)

    evaluations = mc_samples * len(signs)
    value /= evaluations
    for array in grads.arrays().values():
        array /= evaluations

    # Entropy terms
    value += lam * (np.sum(state.log_a) + np.sum(state.log_a_h))
    grads.log_a += lam
    grads.log_a_h += lam

    if joint and not freeze_b:
        b_field = np.broadcast_to(b, image_shape)
        value += lam * np.sum(np.log(b_field) - 0.5 * b_field**2)
        grads.log_b += lam * _sum_to_shape(1 - b_field**2, state.log_b.shape)

    return float(value), grads


@dataclass(frozen=True)
class FitReport:
    """Record of a variational fit.

    Attributes
    ----------
    trace : pd.DataFrame
        One row per step, with the columns ``iteration``, ``elbo`` and ``rejected``.
    rejected_steps : int
        Number of steps rejected because the bound or its gradient was not finite.
    quality_warning : bool
        Whether more than 10% of the steps were rejected.
    seconds : float
        Wall time of the fit.
    """

    trace: pd.DataFrame
    rejected_steps: int
    quality_warning: bool
    seconds: float


class _Adam:
    """Adam ascent on the fields of a `VariationalState`."""

    def __init__(self, cfg: VbleConfig, state: VariationalState, frozen: tuple[str, ...] = ()):
        self.cfg = cfg
        self.frozen = frozen
        self.first = state.zeros_like()
        self.second = state.zeros_like()
        self.t = 0

    def step_size(self, iteration: int) -> float:
        if self.cfg.n_opt_iters == 1:
            return self.cfg.step_size
        return self.cfg.step_size * self.cfg.final_step_ratio ** (iteration / (self.cfg.n_opt_iters - 1))

    def update(self, state: VariationalState, grads: VariationalState, iteration: int) -> VariationalState:
        cfg = self.cfg
        self.t += 1
        step = self.step_size(iteration)

        updated = {}
        for name, value in state.arrays().items():
            if name in self.frozen:
                updated[name] = value
                continue

            gradient = getattr(grads, name)
            first = getattr(self.first, name)
            second = getattr(self.second, name)
            first[...] = cfg.beta1 * first + (1 - cfg.beta1) * gradient
            second[...] = cfg.beta2 * second + (1 - cfg.beta2) * gradient**2

            first_hat = first / (1 - cfg.beta1**self.t)
            second_hat = second / (1 - cfg.beta2**self.t)
            updated[name] = value + step * first_hat / (np.sqrt(second_hat) + cfg.eps)

        return VariationalState(**updated)


def initial_state(y: NDArray[np.float64], fm: ForwardModel, model: GenerativeModel, cfg: VbleConfig):
    """Encoder warm start: latent means of the upsampled measurement, unit widths and deviation scales."""
    z_bar, h_bar = model.encode(upsample_bicubic(y, fm.scale))
    image_shape = fm.image_shape(y.shape)
    b_shape = image_shape if cfg.b_resolution == BResolution.PIXEL else (1, 1)

    with np.errstate(divide="ignore"):
        log_b = np.full(b_shape, np.log(cfg.b_init))

    return VariationalState(
        z_bar=z_bar,
        log_a=np.full(z_bar.shape, np.log(cfg.a_init)),
        h_bar=h_bar,
        log_a_h=np.full(h_bar.shape, np.log(cfg.a_init)),
        log_b=log_b,
    )


@solver
def fit(
    y: ImageGrid | ArrayLike,
    fm: ForwardModel,
    model: GenerativeModel,
    cfg: VbleConfig | None = None,
    *,
    rng: Rng | None = None,
    return_report: bool = False,
) -> tuple[VariationalState, FitReport]:
    """Fit the variational posterior of a measurement.

    Step ``t`` draws its noise from substream ``t`` of substream 0 of `rng`. Steps whose bound or
    gradient is not finite are rejected and leave the state unchanged.

    Parameters
    ----------
    y : ImageGrid | ArrayLike
        The measurement.
    fm : ForwardModel
        The forward model.
    model : GenerativeModel
        The generative model.
    cfg : VbleConfig, optional
        Solver parameters. Defaults to `VbleConfig()`.
    rng : Rng, optional
        Source of randomness. Defaults to ``Rng(cfg.seed)``.
    return_report : bool
        If `True`, also return a `FitReport`. Defaults to `False`.

    Returns
    -------
    VariationalState | tuple[VariationalState, FitReport]
        The fitted state, and optionally the report.

    Raises
    ------
    DimensionError
        If the image dimensions do not match the model.
    """
    cfg = cfg or VbleConfig()
    y = as_image(y)
    model.check_image_shape(fm.image_shape(y.shape))

    start = time.perf_counter()
    state = initial_state(y, fm, model, cfg)

    frozen = ("log_b",) if cfg.mode == VbleMode.VBLE or cfg.freeze_b else ()
    optimizer = _Adam(cfg, state, frozen)
    fit_rng = (rng or Rng(cfg.seed)).substream(0)

    trace = []
    rejected = 0
    for iteration in range(cfg.n_opt_iters):
        value, grads = elbo_estimate(
            state,
            y,
            fm,
            model,
            cfg.lam,
            fit_rng.substream(iteration),
            cfg.mode,
            cfg.mc_samples_per_step,
            freeze_b=cfg.freeze_b,
            antithetic=cfg.antithetic,
        )

        if not np.isfinite(value) or not grads.is_finite():
            rejected += 1
            trace.append({"iteration": iteration, "elbo": value, "rejected": True})
            logger.debug("Rejected step %d: the bound is not finite", iteration)
            continue

        state = optimizer.update(state, grads, iteration)
        trace.append({"iteration": iteration, "elbo": value, "rejected": False})

        if iteration % 100 == 0:
            logger.debug("Step %d: ELBO %.6g", iteration, value)

    quality_warning = rejected > REJECTED_STEPS_WARNING_RATIO * cfg.n_opt_iters
    if quality_warning:
        warnings.warn(
            f"{rejected} of {cfg.n_opt_iters} optimization steps were rejected; the fitted posterior may be unreliable."
        )

    report = FitReport(
        trace=pd.DataFrame(trace, columns=["iteration", "elbo", "rejected"]),
        rejected_steps=rejected,
        quality_warning=quality_warning,
        seconds=time.perf_counter() - start,
    )

    return state, report


def sample_posterior(
    state: VariationalState,
    model: GenerativeModel,
    n: int,
    rng: Rng,
    mode: VbleMode | str = VbleMode.VBLE,
) -> list[NDArray[np.float64]]:
    """Draw images from the fitted variational posterior.

    Sample ``i`` uses substream ``i`` of `rng`, so samples can be drawn in any order or in parallel.

    Parameters
    ----------
    state : VariationalState
        The fitted state.
    model : GenerativeModel
        The generative model.
    n : int
        Number of samples.
    rng : Rng
        Source of randomness.
    mode : VbleMode | str
        In `VbleMode.VBLE` the samples are decoder means; in `VbleMode.VBLE_XZ` image noise of deviation
        ``b * sigma(z)`` is added. Defaults to `VbleMode.VBLE`.

    Returns
    -------
    list[np.ndarray]
        The samples.
    """
    joint = VbleMode(mode) == VbleMode.VBLE_XZ
    a, a_h, b = state.a, state.a_h, state.b

    samples = []
    for i in range(n):
        sample_rng = rng.substream(i)
        latent_rng, image_rng = sample_rng.substream(_LATENT_STREAM), sample_rng.substream(_IMAGE_STREAM)

        z = state.z_bar + a * latent_rng.uniform(state.z_bar.shape, -0.5, 0.5)
        h = state.h_bar + a_h * latent_rng.uniform(state.h_bar.shape, -0.5, 0.5)
        mean, sigma = model.decode(z, h)

        samples.append(mean + b * sigma * image_rng.normal(mean.shape) if joint else mean)

    return samples


def _stack_samples(samples: Sequence[ImageGrid | ArrayLike]) -> NDArray[np.float64]:
    if len(samples) < 2:  # noqa: PLR2004
        raise DataError(f"At least 2 samples are needed, got {len(samples)}.")
    return np.stack([as_image(sample) for sample in samples])


def mmse_and_quantiles(
    samples: Sequence[ImageGrid | ArrayLike], alpha: float
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Minimum mean square error estimate and predicted error quantile map.

    Parameters
    ----------
    samples : Sequence[ImageGrid | ArrayLike]
        At least 2 posterior samples.
    alpha : float
        Quantile level, in (0, 1).

    Returns
    -------
    tuple[np.ndarray, np.ndarray]
        The per-pixel sample mean, and the per-pixel `alpha`-quantile of the absolute deviation of the samples from
        it, interpolating linearly between order statistics.

    Raises
    ------
    DataError
        If fewer than 2 samples are given.
    ConfigError
        If `alpha` is not in (0, 1).
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}.")

    stack = _stack_samples(samples)
    mmse = stack.mean(axis=0)

    return mmse, np.quantile(np.abs(stack - mmse), alpha, axis=0)


def posterior_deviation(samples: Sequence[ImageGrid | ArrayLike]) -> NDArray[np.float64]:
    """Per-pixel sample standard deviation of posterior samples."""
    return _stack_samples(samples).std(axis=0, ddof=1)

