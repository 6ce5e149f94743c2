"""Calibration of predicted error bounds and coverage evaluation.

Predicted per-pixel posterior deviations are mapped to error bounds of level alpha by learning, on a calibration set,
the alpha-quantile of the true absolute error conditioned on the predicted deviation. Deviations are split into
equal-population bins; the per-bin quantiles are made nondecreasing with a weighted isotonic regression.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
from scipy.optimize import isotonic_regression

from satrestore.errors import ConfigError, DataError, DimensionError
from satrestore.imaging import as_image

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence
    from os import PathLike

    from numpy.typing import ArrayLike, NDArray

    from satrestore.imaging import ImageGrid

__all__ = (
    "CalibrationTable",
    "apply_calibration",
    "calibrate",
    "coverage_curve",
    "icp",
)

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99)


@dataclass(frozen=True, eq=False)
class CalibrationTable:
    """Calibrated error bounds per bin of predicted deviation.

    Attributes
    ----------
    alpha : float
        Level of the bounds.
    bin_edges : np.ndarray
        Strictly increasing bin thresholds, one more than the number of bins.
    quantiles : np.ndarray
        Calibrated bound of each bin, nondecreasing.
    counts : np.ndarray
        Number of calibration pixels in each bin.
    min_count : int
        Bins with fewer pixels inherit the quantile of the nearest populated bin. Defaults to 50.
    """

    alpha: float
    bin_edges: NDArray[np.float64]
    quantiles: NDArray[np.float64]
    counts: NDArray[np.int64]
    min_count: int = 50

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        quantiles = np.asarray(self.quantiles, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)

        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):  # noqa: PLR2004
            raise DataError("Calibration bin edges must be a strictly increasing sequence of at least 2 values.")
        if quantiles.shape != (len(edges) - 1,) or counts.shape != quantiles.shape:
            raise DimensionError(
                f"A calibration table with {len(edges) - 1} bins needs as many quantiles and counts, "
                f"got {quantiles.shape} and {counts.shape}."
            )

        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "quantiles", quantiles)
        object.__setattr__(self, "counts", counts)

    @property
    def n_bins(self) -> int:
        return len(self.quantiles)

    def to_frame(self) -> pd.DataFrame:
        """One row per bin, with the columns ``lower``, ``upper``, ``count`` and ``quantile``."""
        return pd.DataFrame(
            {
                "lower": self.bin_edges[:-1],
                "upper": self.bin_edges[1:],
                "count": self.counts,
                "quantile": self.quantiles,
            }
        )

    def to_json(self, path: str | PathLike) -> None:
        document = {
            "alpha": self.alpha,
            "min_count": self.min_count,
            "bin_edges": self.bin_edges.tolist(),
            "quantiles": self.quantiles.tolist(),
            "counts": self.counts.tolist(),
        }
        Path(path).write_text(json.dumps(document, indent=2))

    @classmethod
    def from_json(cls, path: str | PathLike) -> CalibrationTable:
        """Load a table saved with `to_json`.

        Raises
        ------
        DataError
            If the document is not a valid calibration table.
        """
        try:
            document = json.loads(Path(path).read_text())
            return cls(
                alpha=float(document["alpha"]),
                bin_edges=document["bin_edges"],
                quantiles=document["quantiles"],
                counts=document["counts"],
                min_count=int(document.get("min_count", 50)),
            )
        except (KeyError, json.JSONDecodeError) as e:
            raise DataError(f"{path} is not a valid calibration table: {e}") from e


def _bin_index(edges: NDArray[np.float64], values: NDArray[np.float64]) -> NDArray[np.intp]:
    return np.clip(np.searchsorted(edges[1:-1], values, side="right"), 0, len(edges) - 2)


def _fill_underpopulated(quantiles: NDArray[np.float64], populated: NDArray[np.bool_]) -> NDArray[np.float64]:
    indices = np.flatnonzero(populated)
    nearest = indices[np.argmin(np.abs(np.arange(len(quantiles))[:, None] - indices[None, :]), axis=1)]
    return quantiles[nearest]


def calibrate(
    pairs: Iterable[tuple[ImageGrid | ArrayLike, ImageGrid | ArrayLike]],
    alpha: float,
    n_bins: int = 16,
    min_count: int = 50,
) -> CalibrationTable:
    """Learn calibrated error bounds from (predicted deviation, true error) pairs.

    Parameters
    ----------
    pairs : Iterable[tuple[ImageGrid | ArrayLike, ImageGrid | ArrayLike]]
        Predicted per-pixel deviations and the corresponding true errors, typically ``ground_truth - mmse``.
    alpha : float
        Level of the bounds, in (0, 1).
    n_bins : int
        Number of equal-population bins. Bins with equal edges are merged. Defaults to 16.
    min_count : int
        Minimum number of pixels of a populated bin. Defaults to 50.

    Returns
    -------
    CalibrationTable
        The fitted table.

    Raises
    ------
    DataError
        If no pairs are given.
    DimensionError
        If the shapes within a pair differ.
    ConfigError
        If `alpha` or `n_bins` is out of range.
    """
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}.")
    if n_bins < 1:
        raise ConfigError(f"n_bins must be positive, got {n_bins}.")

    deviations, errors = [], []
    for predicted, error in pairs:
        predicted, error = as_image(predicted), as_image(error)
        if predicted.shape != error.shape:
            raise DimensionError(f"Predicted deviation {predicted.shape} and error {error.shape} shapes differ.")
        deviations.append(predicted.ravel())
        errors.append(np.abs(error).ravel())

    if not deviations:
        raise DataError("Calibration needs at least one (predicted deviation, true error) pair.")

    deviations = np.concatenate(deviations)
    errors = np.concatenate(errors)

    edges = np.unique(np.quantile(deviations, np.linspace(0, 1, n_bins + 1)))
    if len(edges) == 1:
        edges = np.array([edges[0], np.nextafter(edges[0], np.inf)])

    index = _bin_index(edges, deviations)
    counts = np.bincount(index, minlength=len(edges) - 1)

    populated = counts >= min_count
    if not populated.any():
        populated = counts > 0

    quantiles = np.zeros(len(counts))
    for j in np.flatnonzero(populated):
        quantiles[j] = np.quantile(errors[index == j], alpha, method="higher")

    quantiles = _fill_underpopulated(quantiles, populated)
    quantiles = isotonic_regression(quantiles, weights=np.maximum(counts, 1), increasing=True).x

    logger.info("Calibrated %d pixels in %d bins at level %.3g", len(deviations), len(counts), alpha)

    return CalibrationTable(alpha, edges, quantiles, counts, min_count)


def apply_calibration(table: CalibrationTable, predicted_deviation: ImageGrid | ArrayLike) -> NDArray[np.float64]:
    """Per-pixel calibrated error bound.

    Each pixel gets the quantile of the bin its predicted deviation falls in. Deviations below the first edge use the
    first bin, deviations beyond the last edge use the last bin.
    """
    predicted_deviation = as_image(predicted_deviation)
    return table.quantiles[_bin_index(table.bin_edges, predicted_deviation)]


def icp(
    ground_truth: ImageGrid | ArrayLike,
    mmse: ImageGrid | ArrayLike,
    bound_alpha: ImageGrid | ArrayLike | float,
) -> float:
    """Interval coverage probability: the fraction of pixels with ``|ground_truth - mmse| <= bound_alpha``."""
    ground_truth, mmse = as_image(ground_truth), as_image(mmse)
    if ground_truth.shape != mmse.shape:
        raise DimensionError(f"Ground truth {ground_truth.shape} and estimate {mmse.shape} shapes differ.")

    return float(np.mean(np.abs(ground_truth - mmse) <= np.asarray(bound_alpha)))


def coverage_curve(
    ground_truth: ImageGrid | ArrayLike,
    mmse: ImageGrid | ArrayLike,
    samples: Sequence[ImageGrid | ArrayLike],
    alphas: Iterable[float] = DEFAULT_ALPHAS,
    tables: Mapping[float, CalibrationTable] | None = None,
) -> pd.DataFrame:
    """Interval coverage probability as a function of the level.

    Without `tables`, the bound of level alpha is the per-pixel alpha-quantile of ``|sample - mmse|``. With `tables`,
    it is the calibrated bound of the sample standard deviation, using the table of each level.

    Returns
    -------
    pd.DataFrame
        One row per level, with the columns ``alpha``, ``icp`` and ``stderr``, the binomial standard error.

    Raises
    ------
    ConfigError
        If a level has no calibration table.
    """
    ground_truth, mmse = as_image(ground_truth), as_image(mmse)
    stack = np.stack([as_image(sample) for sample in samples])
    n = ground_truth.size

    deviation = stack.std(axis=0, ddof=1) if tables is not None else None

    rows = []
    for alpha in alphas:
        if tables is None:
            bound = np.quantile(np.abs(stack - mmse), alpha, axis=0)
        else:
            if alpha not in tables:
                raise ConfigError(f"No calibration table for level {alpha}.")
            bound = apply_calibration(tables[alpha], deviation)

        coverage = icp(ground_truth, mmse, bound)
        rows.append({"alpha": alpha, "icp": coverage, "stderr": np.sqrt(coverage * (1 - coverage) / n)})

    return pd.DataFrame(rows, columns=["alpha", "icp", "stderr"])
