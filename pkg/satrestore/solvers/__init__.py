from __future__ import annotations

from satrestore.solvers.satdpir import (
    DpirConfig,
    DpirMode,
    RestoreReport,
    noise_schedule,
    prox_datafit_exact,
    prox_datafit_fixed_sigma,
    restore,
)
from satrestore.solvers.vble import (
    BResolution,
    FitReport,
    VariationalState,
    VbleConfig,
    VbleMode,
    elbo_estimate,
    fit,
    mmse_and_quantiles,
    posterior_deviation,
    sample_posterior,
)

__all__ = (
    "DpirConfig",
    "DpirMode",
    "RestoreReport",
    "noise_schedule",
    "prox_datafit_exact",
    "prox_datafit_fixed_sigma",
    "restore",
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
